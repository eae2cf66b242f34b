//! Second-order supervision from manipulation masks.

use std::path::Path;

use crate::error::{ensure_dims, Error, Result};
use crate::frequency::luma;
use crate::mpsm::{PatchGrid, SimilarityPattern};
use crate::raster::Image;

pub const DEFAULT_MASK_THRESHOLD: f64 = 0.15;

/// Binary map: 0 = real pixel, 1 = forged pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManipulationMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl ManipulationMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        ensure_dims!(
            data.len() == height * width,
            "mask {height}x{width} needs {} values, got {}",
            height * width,
            data.len()
        );
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Dimension("mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn forged_fraction(&self) -> f64 {
        self.data.iter().map(|&v| v as usize).sum::<usize>() as f64 / self.data.len() as f64
    }

    pub fn is_all_real(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn to_image(&self) -> Result<Image> {
        Image::new(self.height, self.width, 1, self.to_f64())
    }

    /// Binary PGM with values 0/255.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_image()?.save(path)
    }

    /// Reads a grayscale image; pixels at or above mid-gray are forged.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = Image::load(path)?;
        ensure_dims!(img.channels() == 1, "mask file must be grayscale");
        let data = img.data().iter().map(|&v| u8::from(v >= 0.5)).collect();
        Self::new(img.height(), img.width(), data)
    }
}

/// Marks pixels whose luminance of the absolute RGB difference exceeds `threshold`.
pub fn build_mask(source: &Image, forged: &Image, threshold: f64) -> Result<ManipulationMask> {
    ensure_dims!(
        source.channels() == 3 && forged.channels() == 3,
        "build_mask needs two RGB images"
    );
    ensure_dims!(
        source.same_extent(forged),
        "build_mask: source {}x{} and forged {}x{} differ",
        source.height(),
        source.width(),
        forged.height(),
        forged.width()
    );
    let data = source
        .data()
        .chunks_exact(3)
        .zip(forged.data().chunks_exact(3))
        .map(|(s, f)| {
            let g = luma((f[0] - s[0]).abs(), (f[1] - s[1]).abs(), (f[2] - s[2]).abs());
            u8::from(g > threshold)
        })
        .collect();
    ManipulationMask::new(source.height(), source.width(), data)
}

/// Forged fraction of each grid block, in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchProbabilities {
    k: usize,
    p: Vec<f64>,
}

impl PatchProbabilities {
    pub fn new(k: usize, p: Vec<f64>) -> Result<Self> {
        ensure_dims!(p.len() == k * k, "expected {} probabilities, got {}", k * k, p.len());
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Dimension("patch probabilities must lie in [0, 1]".into()));
        }
        Ok(Self { k, p })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn values(&self) -> &[f64] {
        &self.p
    }
}

/// Averages the mask over each block of the same grid the feature patches use;
/// only real pixels count, never slot padding.
pub fn patch_probabilities(mask: &ManipulationMask, k: usize) -> Result<PatchProbabilities> {
    patch_probabilities_for(mask, k, mask.height, mask.width)
}

/// Like [`patch_probabilities`], but with the grid laid out over a
/// `feature_height x feature_width` map that covers the mask, so each block
/// averages exactly the pixels under the matching feature patch.
pub fn patch_probabilities_for(
    mask: &ManipulationMask,
    k: usize,
    feature_height: usize,
    feature_width: usize,
) -> Result<PatchProbabilities> {
    ensure_dims!(
        feature_height > 0 && feature_width > 0 && feature_height <= mask.height && feature_width <= mask.width,
        "feature grid {feature_height}x{feature_width} does not fit a {}x{} mask",
        mask.height,
        mask.width
    );
    let grid = PatchGrid::new(feature_height, feature_width, k)?;
    let to_rows = |r: usize| r * mask.height / feature_height;
    let to_cols = |c: usize| c * mask.width / feature_width;
    let p = (0..grid.num_patches())
        .map(|i| {
            let ((r0, r1), (c0, c1)) = grid.block(i);
            let (r0, r1, c0, c1) = (to_rows(r0), to_rows(r1), to_cols(c0), to_cols(c1));
            let mut forged = 0usize;
            for r in r0..r1 {
                forged += mask.data[r * mask.width + c0..r * mask.width + c1]
                    .iter()
                    .map(|&v| v as usize)
                    .sum::<usize>();
            }
            forged as f64 / ((r1 - r0) * (c1 - c0)) as f64
        })
        .collect();
    PatchProbabilities::new(k, p)
}

/// `s[i][j] = 1 - (p_i - p_j)^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSimilarity(SimilarityPattern);

impl TargetSimilarity {
    pub fn pattern(&self) -> &SimilarityPattern {
        &self.0
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn side(&self) -> usize {
        self.0.side()
    }
}

pub fn target_similarity(p: &PatchProbabilities) -> TargetSimilarity {
    let v = p.values();
    let n = v.len();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let d = v[i] - v[j];
            data[i * n + j] = 1.0 - d * d;
        }
    }
    TargetSimilarity(SimilarityPattern::new(n, data).expect("square"))
}
