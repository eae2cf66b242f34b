//! Synthetic face-forgery corpus.
//!
//! Real samples are procedural "faces": band-limited value noise over smooth
//! gradients, with an elliptical face, two eyes and a mouth. A forgery pastes
//! an ellipse of a second, tone-shifted texture that went through a 2x
//! down/up-sampling round trip with per-block noise, so the pasted region
//! carries blocky high-frequency artifacts. The blend is feathered at the
//! boundary.
//!
//! Pixel values are kept on the 8-bit grid so a corpus written to disk and
//! read back is bit-identical to the generated one.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;
use crate::supervision::{build_mask, ManipulationMask, DEFAULT_MASK_THRESHOLD};

pub const MIN_SIZE: usize = 32;
pub const MIN_FORGED_FRACTION: f64 = 0.04;
pub const MAX_FORGED_FRACTION: f64 = 0.40;
/// Corrupt-sample share above which loading a corpus fails.
pub const MAX_CORRUPT_FRACTION: f64 = 0.05;
const MAX_ATTEMPTS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub image: Image,
    pub mask: ManipulationMask,
    /// 0 real, 1 forged.
    pub label: u8,
    pub seed: u64,
}

fn check_size(size: usize) -> Result<()> {
    if size < MIN_SIZE {
        return Err(Error::Config(format!("image size must be at least {MIN_SIZE}, got {size}")));
    }
    Ok(())
}

fn on_grid(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Smoothly interpolated lattice noise in `[0, 1]` with `cells` cells per side.
fn value_noise<R: Rng>(rng: &mut R, size: usize, cells: usize) -> Vec<f64> {
    let side = cells + 1;
    let lattice: Vec<f64> = (0..side * side).map(|_| rng.random()).collect();
    let mut out = Vec::with_capacity(size * size);
    for i in 0..size {
        let y = i as f64 / size as f64 * cells as f64;
        let (y0, ty) = (y.floor() as usize, smoothstep(y.fract()));
        for j in 0..size {
            let x = j as f64 / size as f64 * cells as f64;
            let (x0, tx) = (x.floor() as usize, smoothstep(x.fract()));
            let at = |r: usize, c: usize| lattice[r * side + c];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    /// Normalized radius; 1 on the boundary.
    fn radius(&self, i: usize, j: usize) -> f64 {
        let dy = (i as f64 + 0.5 - self.cy) / self.ry;
        let dx = (j as f64 + 0.5 - self.cx) / self.rx;
        (dy * dy + dx * dx).sqrt()
    }

    /// 1 inside, 0 outside, linear ramp `width` pixels wide at the boundary.
    fn coverage(&self, i: usize, j: usize, width: f64) -> f64 {
        let r = self.radius(i, j);
        let edge = width / self.ry.min(self.rx);
        ((1.0 - r) / edge + 0.5).clamp(0.0, 1.0)
    }
}

fn paint(data: &mut [f64], size: usize, shape: Ellipse, color: [f64; 3], feather: f64) {
    for i in 0..size {
        for j in 0..size {
            let a = shape.coverage(i, j, feather);
            if a > 0.0 {
                for (c, &v) in color.iter().enumerate() {
                    let p = &mut data[(i * size + j) * 3 + c];
                    *p = (1.0 - a) * *p + a * v;
                }
            }
        }
    }
}

fn real_image<R: Rng>(rng: &mut R, size: usize) -> Vec<f64> {
    let s = size as f64;
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.7));
    let (gy, gx) = (rng.random_range(-0.25..0.25), rng.random_range(-0.25..0.25));
    let coarse = value_noise(rng, size, 4);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.3));
    let mut data = vec![0.0; size * size * 3];
    for i in 0..size {
        for j in 0..size {
            let g = gy * (i as f64 / s - 0.5) + gx * (j as f64 / s - 0.5);
            for c in 0..3 {
                data[(i * size + j) * 3 + c] = base[c] + g + tint[c] * (coarse[i * size + j] - 0.5);
            }
        }
    }

    let face = Ellipse {
        cy: s * rng.random_range(0.45..0.55),
        cx: s * rng.random_range(0.45..0.55),
        ry: s * rng.random_range(0.32..0.40),
        rx: s * rng.random_range(0.24..0.30),
    };
    let skin = [
        rng.random_range(0.65..0.85),
        rng.random_range(0.45..0.62),
        rng.random_range(0.35..0.50),
    ];
    let detail = value_noise(rng, size, 8);
    let amplitude = rng.random_range(0.05..0.12);
    for i in 0..size {
        for j in 0..size {
            let a = face.coverage(i, j, 1.5);
            if a > 0.0 {
                let shade = 1.0 - 0.25 * face.radius(i, j).powi(2) + amplitude * (detail[i * size + j] - 0.5);
                for c in 0..3 {
                    let p = &mut data[(i * size + j) * 3 + c];
                    *p = (1.0 - a) * *p + a * skin[c] * shade;
                }
            }
        }
    }

    let eye_dy = face.ry * rng.random_range(0.18..0.28);
    let eye_dx = face.rx * rng.random_range(0.35..0.45);
    let eye_r = s * rng.random_range(0.035..0.05);
    let iris = rng.random_range(0.2..0.4);
    for side in [-1.0, 1.0] {
        let eye = Ellipse {
            cy: face.cy - eye_dy,
            cx: face.cx + side * eye_dx,
            ry: eye_r * 0.7,
            rx: eye_r,
        };
        paint(&mut data, size, eye, [iris, iris, iris * 1.2], 1.0);
    }
    let mouth = Ellipse {
        cy: face.cy + face.ry * rng.random_range(0.4..0.5),
        cx: face.cx,
        ry: s * rng.random_range(0.025..0.04),
        rx: face.rx * rng.random_range(0.3..0.45),
    };
    paint(&mut data, size, mouth, [0.55, 0.2, 0.22], 1.0);

    data.iter_mut().for_each(|v| *v = on_grid(*v));
    data
}

/// A clean sample: label 0, all-real mask. Deterministic in `seed`.
pub fn generate_real(seed: u64, size: usize) -> Result<SyntheticSample> {
    check_size(size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = Image::new(size, size, 3, real_image(&mut rng, size))?;
    Ok(SyntheticSample {
        image,
        mask: ManipulationMask::zeros(size, size),
        label: 0,
        seed,
    })
}

/// 2x2 block average followed by nearest-neighbour upsampling, per channel.
fn blocky(data: &[f64], size: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for bi in (0..size).step_by(2) {
        for bj in (0..size).step_by(2) {
            for c in 0..3 {
                let cells: Vec<usize> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|&(di, dj)| ((bi + di).min(size - 1), (bj + dj).min(size - 1)))
                    .map(|(i, j)| (i * size + j) * 3 + c)
                    .collect();
                let mean = cells.iter().map(|&k| data[k]).sum::<f64>() / 4.0;
                for k in cells {
                    out[k] = mean;
                }
            }
        }
    }
    out
}

fn forge<R: Rng>(rng: &mut R, source: &[f64], size: usize) -> Vec<f64> {
    let s = size as f64;
    let region = Ellipse {
        cy: s * rng.random_range(0.35..0.65),
        cx: s * rng.random_range(0.35..0.65),
        ry: s * rng.random_range(0.12..0.24),
        rx: s * rng.random_range(0.12..0.24),
    };
    let (mut mean, mut count) = ([0.0; 3], 0.0f64);
    for i in 0..size {
        for j in 0..size {
            if region.radius(i, j) <= 1.0 {
                for c in 0..3 {
                    mean[c] += source[(i * size + j) * 3 + c];
                }
                count += 1.0;
            }
        }
    }
    let mean = mean.map(|m| m / count.max(1.0));
    let luma = 0.299 * mean[0] + 0.587 * mean[1] + 0.114 * mean[2];
    let shift = rng.random_range(0.3..0.45) * if luma < 0.5 { 1.0 } else { -1.0 };
    let texture = value_noise(rng, size, 4);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.2));
    let shifted: Vec<f64> = (0..size * size * 3)
        .map(|k| mean[k % 3] + shift + tint[k % 3] * (texture[k / 3] - 0.5))
        .collect();
    let mut patch = blocky(&shifted, size);
    // one gray noise value per 2x2 block keeps the grid visible
    let noise = rng.random_range(0.16..0.24);
    for bi in (0..size).step_by(2) {
        for bj in (0..size).step_by(2) {
            let n = noise * (2.0 * rng.random::<f64>() - 1.0);
            for (i, j) in [(bi, bj), (bi, bj + 1), (bi + 1, bj), (bi + 1, bj + 1)] {
                if i < size && j < size {
                    for c in 0..3 {
                        patch[(i * size + j) * 3 + c] += n;
                    }
                }
            }
        }
    }

    let feather = rng.random_range(1.5..3.0);
    let mut out = source.to_vec();
    for i in 0..size {
        for j in 0..size {
            let a = region.coverage(i, j, feather);
            for c in 0..3 {
                let k = (i * size + j) * 3 + c;
                out[k] = on_grid((1.0 - a) * source[k] + a * patch[k]);
            }
        }
    }
    out
}

fn derive(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `(source, forged)`: the untouched real sample and its forgery, whose mask
/// marks pixels that changed by more than the mask threshold in luminance.
pub fn generate_forged(seed: u64, size: usize) -> Result<(SyntheticSample, SyntheticSample)> {
    check_size(size)?;
    let source = generate_real(derive(seed, 1), size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, 2));
    for _ in 0..MAX_ATTEMPTS {
        let data = forge(&mut rng, source.image.data(), size);
        let image = Image::new(size, size, 3, data)?;
        let mask = build_mask(&source.image, &image, DEFAULT_MASK_THRESHOLD)?;
        let f = mask.forged_fraction();
        if (MIN_FORGED_FRACTION..=MAX_FORGED_FRACTION).contains(&f) {
            let forged = SyntheticSample {
                image,
                mask,
                label: 1,
                seed,
            };
            return Ok((source, forged));
        }
    }
    Err(Error::Corpus(format!("seed {seed}: no forgery within the mask-fraction bounds")))
}

/// Sample `index` of the corpus seeded by `seed`: real for even indices,
/// forged for odd ones.
pub fn corpus_sample(seed: u64, index: usize, size: usize) -> Result<SyntheticSample> {
    let s = derive(seed, index as u64 + 16);
    if index % 2 == 0 {
        generate_real(s, size)
    } else {
        generate_forged(s, size).map(|(_, forged)| forged)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ManifestRow {
    path: String,
    label: u8,
    seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub samples: Vec<SyntheticSample>,
    /// Manifest rows that could not be read when loading.
    pub skipped: usize,
}

impl Corpus {
    /// `count` samples with `ceil(count / 2)` real and `floor(count / 2)` forged.
    pub fn generate(count: usize, size: usize, seed: u64) -> Result<Self> {
        check_size(size)?;
        let samples = (0..count)
            .into_par_iter()
            .map(|i| corpus_sample(seed, i, size))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples, skipped: 0 })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Writes `images/NNNNN.png`, `masks/NNNNN.pgm` and `manifest.csv`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for sub in ["images", "masks"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let manifest = dir.join("manifest.csv");
        let mut writer = csv::Writer::from_path(&manifest)?;
        for (i, s) in self.samples.iter().enumerate() {
            let path = format!("images/{i:05}.png");
            s.image.save(dir.join(&path))?;
            s.mask.save(mask_path(dir, &path))?;
            writer.serialize(ManifestRow {
                path,
                label: s.label,
                seed: s.seed,
            })?;
        }
        writer.flush().map_err(|e| Error::io(&manifest, e))?;
        Ok(())
    }

    /// Reads a corpus written by [`Corpus::save`]. Unreadable or inconsistent
    /// samples are skipped with a warning; more than 5% of them is an error.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut reader = csv::Reader::from_path(dir.join("manifest.csv"))?;
        let rows: Vec<ManifestRow> = reader.deserialize().collect::<std::result::Result<_, _>>()?;
        if rows.is_empty() {
            return Err(Error::Corpus(format!("{}: empty manifest", dir.display())));
        }
        let mut samples = Vec::with_capacity(rows.len());
        let mut skipped = 0;
        for row in &rows {
            match load_sample(dir, row) {
                Ok(s) => samples.push(s),
                Err(e) => {
                    log::warn!("skipping corrupt sample {}: {e}", row.path);
                    skipped += 1;
                }
            }
        }
        if skipped as f64 > MAX_CORRUPT_FRACTION * rows.len() as f64 {
            return Err(Error::Corpus(format!(
                "{skipped} of {} samples are corrupt (limit {:.0}%)",
                rows.len(),
                MAX_CORRUPT_FRACTION * 100.0
            )));
        }
        Ok(Self { samples, skipped })
    }
}

fn mask_path(dir: &Path, image_path: &str) -> PathBuf {
    let stem = Path::new(image_path).file_stem().unwrap_or_default();
    dir.join("masks").join(stem).with_extension("pgm")
}

fn load_sample(dir: &Path, row: &ManifestRow) -> Result<SyntheticSample> {
    let image = Image::load(dir.join(&row.path))?;
    if image.channels() != 3 {
        return Err(Error::Corpus(format!("{}: expected an RGB image", row.path)));
    }
    let mask = ManipulationMask::load(mask_path(dir, &row.path))?;
    if mask.height() != image.height() || mask.width() != image.width() {
        return Err(Error::Corpus(format!("{}: mask extent differs from image", row.path)));
    }
    match row.label {
        0 if !mask.is_all_real() => Err(Error::Corpus(format!("{}: real sample with forged pixels", row.path))),
        0 | 1 => Ok(SyntheticSample {
            image,
            mask,
            label: row.label,
            seed: row.seed,
        }),
        l => Err(Error::Corpus(format!("{}: label {l} is not 0 or 1", row.path))),
    }
}
