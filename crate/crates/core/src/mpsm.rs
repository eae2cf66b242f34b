//! Multi-scale patch similarity.
//!
//! The three fused stage maps are resized to the coarsest extent and
//! concatenated, the result is cut into a `k x k` grid of patches, and the
//! pattern `s_hat[i][j] = (cos(u_i, u_j) + 1) / 2` is formed over all pairs.

use std::fmt::Write as _;
use std::path::Path;

use image::GrayImage;

use crate::diff::{Tape, Var, NORM_EPS};
use crate::error::{ensure_dims, Error, Result};
use crate::raster::quantize;

pub const DEFAULT_K: usize = 5;

/// Block layout of a `k x k` grid over a `height x width` map.
///
/// Every patch slot is `ceil(height / k) x ceil(width / k)`. Block `r` spans
/// rows `[floor(r * height / k), floor((r + 1) * height / k))`, so no block is
/// ever empty; blocks shorter than the slot are filled by repeating their last
/// row/column. When `k` divides the extent this is the plain even split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    k: usize,
    height: usize,
    width: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, k: usize) -> Result<Self> {
        if k == 0 || k > height.min(width) {
            return Err(Error::Config(format!(
                "patch grid side k = {k} must lie in [1, {}] for a {height}x{width} map",
                height.min(width)
            )));
        }
        Ok(Self { k, height, width })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_patches(&self) -> usize {
        self.k * self.k
    }

    pub fn patch_height(&self) -> usize {
        self.height.div_ceil(self.k)
    }

    pub fn patch_width(&self) -> usize {
        self.width.div_ceil(self.k)
    }

    pub fn row_bounds(&self, r: usize) -> (usize, usize) {
        (r * self.height / self.k, (r + 1) * self.height / self.k)
    }

    pub fn col_bounds(&self, c: usize) -> (usize, usize) {
        (c * self.width / self.k, (c + 1) * self.width / self.k)
    }

    /// `(rows, cols)` ranges of patch `i` in row-major grid order.
    pub fn block(&self, i: usize) -> ((usize, usize), (usize, usize)) {
        (self.row_bounds(i / self.k), self.col_bounds(i % self.k))
    }
}

/// Resizes `low` and `mid` to `high`'s spatial extent and concatenates
/// channels in the order `[low, mid, high]`.
pub fn fuse_multiscale(tape: &mut Tape, low: Var, mid: Var, high: Var) -> Result<Var> {
    let shapes = [tape.shape(low).to_vec(), tape.shape(mid).to_vec(), tape.shape(high).to_vec()];
    for s in &shapes {
        ensure_dims!(s.len() == 4, "fuse_multiscale: expected NHWC maps, got {s:?}");
        ensure_dims!(s.iter().all(|&d| d > 0), "fuse_multiscale: zero-extent map {s:?}");
        ensure_dims!(s[0] == shapes[2][0], "fuse_multiscale: batch sizes differ");
    }
    let (h, w) = (shapes[2][1], shapes[2][2]);
    let low = tape.resize_bilinear(low, h, w)?;
    let mid = tape.resize_bilinear(mid, h, w)?;
    tape.concat(&[low, mid, high])
}

/// Flattens each grid block of an NHWC map into a row: `[n, k*k, h*w*c]`.
pub fn partition(tape: &mut Tape, features: Var, k: usize) -> Result<Var> {
    let s = tape.shape(features).to_vec();
    ensure_dims!(s.len() == 4, "partition: expected NHWC map, got {s:?}");
    let (n, height, width, c) = (s[0], s[1], s[2], s[3]);
    let grid = PatchGrid::new(height, width, k)?;
    let (ph, pw) = (grid.patch_height(), grid.patch_width());
    let dim = ph * pw * c;
    let mut index = Vec::with_capacity(n * grid.num_patches() * dim);
    for b in 0..n {
        for i in 0..grid.num_patches() {
            let ((r0, r1), (c0, c1)) = grid.block(i);
            for a in 0..ph {
                let row = r0 + a.min(r1 - r0 - 1);
                for bb in 0..pw {
                    let col = c0 + bb.min(c1 - c0 - 1);
                    let base = ((b * height + row) * width + col) * c;
                    index.extend(base..base + c);
                }
            }
        }
    }
    tape.gather(features, index, &[n, grid.num_patches(), dim])
}

/// `[n, p, d]` patch rows to the `[n, p, p]` pattern `(cos + 1) / 2`.
pub fn similarity_pattern(tape: &mut Tape, patches: Var) -> Result<Var> {
    let unit = tape.l2_normalize(patches, NORM_EPS)?;
    let cos = tape.gram(unit)?;
    let s = tape.affine(cos, 0.5, 0.5);
    // rounding can put |cos| a few ulps past 1
    Ok(tape.clamp(s, 0.0, 1.0))
}

/// A materialized `k^2 x k^2` similarity matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityPattern {
    side: usize,
    data: Vec<f64>,
}

impl SimilarityPattern {
    pub fn new(side: usize, data: Vec<f64>) -> Result<Self> {
        ensure_dims!(
            data.len() == side * side,
            "similarity pattern of side {side} needs {} values, got {}",
            side * side,
            data.len()
        );
        Ok(Self { side, data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.side + j]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.data.chunks_exact(self.side) {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(out, "{}", line.join(","));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
        for rec in reader.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|f| f.trim().parse::<f64>().map_err(|e| Error::Usage(format!("bad value `{f}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let side = rows.len();
        ensure_dims!(rows.iter().all(|r| r.len() == side), "similarity CSV must be square");
        Self::new(side, rows.into_iter().flatten().collect())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }

    /// One pixel per entry, intensity `255 * s`.
    pub fn heatmap(&self) -> GrayImage {
        let bytes = self.data.iter().map(|&v| quantize(v)).collect();
        GrayImage::from_raw(self.side as u32, self.side as u32, bytes).expect("square buffer")
    }

    pub fn save_heatmap(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.heatmap().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}
