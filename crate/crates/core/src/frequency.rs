//! Frequency-domain cue: orthonormal 2-D DCT, triangular high-pass, inverse DCT.
//!
//! Low frequencies sit in the top-left corner of the coefficient grid, so the
//! high-pass zeroes the anti-diagonal triangle `i + j < round(alpha * max(H, W))`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};
use crate::raster::Image;

pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];
pub const DEFAULT_ALPHA: f64 = 0.33;

#[derive(Clone, Debug, PartialEq)]
pub struct DctCoefficients {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl DctCoefficients {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        ensure_dims!(
            data.len() == height * width,
            "coefficient grid {height}x{width} needs {} values, got {}",
            height * width,
            data.len()
        );
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    alpha: f64,
}

impl FilterSpec {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Side of the zeroed triangle for a `height x width` grid.
    pub fn cutoff(&self, height: usize, width: usize) -> usize {
        (self.alpha * height.max(width) as f64).round() as usize
    }
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
        }
    }
}

pub fn to_luminance(img: &Image) -> Result<Image> {
    ensure_dims!(
        img.channels() == 3,
        "luminance needs a 3-channel image, got {} channels",
        img.channels()
    );
    let data = img
        .data()
        .chunks_exact(3)
        .map(|px| luma(px[0], px[1], px[2]))
        .collect();
    Image::new(img.height(), img.width(), 1, data)
}

#[inline]
pub fn luma(r: f64, g: f64, b: f64) -> f64 {
    LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b
}

/// Orthonormal DCT-II basis, `basis[k * n + x] = s_k cos(pi (2x + 1) k / 2n)`.
fn dct_basis(n: usize) -> Vec<f64> {
    let mut basis = vec![0.0; n * n];
    let nf = n as f64;
    for k in 0..n {
        let scale = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        for x in 0..n {
            basis[k * n + x] = scale * (PI * (2 * x + 1) as f64 * k as f64 / (2.0 * nf)).cos();
        }
    }
    basis
}

/// Separable transform, rows first then columns.
/// `inverse` uses the transposed bases (DCT-III).
fn separable(data: &[f64], height: usize, width: usize, inverse: bool) -> Vec<f64> {
    let bh = dct_basis(height);
    let bw = dct_basis(width);
    // Along rows: tmp[i][k] = sum_x B[k][x] data[i][x]  (or B^T for the inverse)
    let mut tmp = vec![0.0; height * width];
    for i in 0..height {
        let row = &data[i * width..(i + 1) * width];
        for k in 0..width {
            let mut acc = 0.0;
            for (x, &v) in row.iter().enumerate() {
                let b = if inverse { bw[x * width + k] } else { bw[k * width + x] };
                acc += b * v;
            }
            tmp[i * width + k] = acc;
        }
    }
    let mut out = vec![0.0; height * width];
    for k in 0..height {
        for y in 0..height {
            let b = if inverse { bh[y * height + k] } else { bh[k * height + y] };
            if b == 0.0 {
                continue;
            }
            let src = &tmp[y * width..(y + 1) * width];
            let dst = &mut out[k * width..(k + 1) * width];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += b * s;
            }
        }
    }
    out
}

pub fn dct2d(img: &Image) -> Result<DctCoefficients> {
    ensure_dims!(
        img.channels() == 1,
        "dct2d needs a single-channel image, got {} channels",
        img.channels()
    );
    let data = separable(img.data(), img.height(), img.width(), false);
    DctCoefficients::new(img.height(), img.width(), data)
}

pub fn idct2d(coeffs: &DctCoefficients) -> Result<Image> {
    let data = separable(&coeffs.data, coeffs.height, coeffs.width, true);
    Image::new(coeffs.height, coeffs.width, 1, data)
}

pub fn highpass_filter(coeffs: &DctCoefficients, spec: FilterSpec) -> DctCoefficients {
    let cutoff = spec.cutoff(coeffs.height, coeffs.width);
    let mut out = coeffs.clone();
    for i in 0..coeffs.height.min(cutoff) {
        for j in 0..coeffs.width.min(cutoff - i) {
            out.data[i * coeffs.width + j] = 0.0;
        }
    }
    out
}

/// `idct2d(highpass_filter(dct2d(luma(img))))`; single-channel input is used as is.
/// The result is not clamped: the sign of the residual is kept.
pub fn frequency_cue(img: &Image, spec: FilterSpec) -> Result<Image> {
    let gray = match img.channels() {
        3 => to_luminance(img)?,
        _ => img.clone(),
    };
    let coeffs = dct2d(&gray)?;
    idct2d(&highpass_filter(&coeffs, spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_gray(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
        Image::from_fn(h, w, 1, |_, _, _| rng.random::<f64>()).unwrap()
    }

    /// O(N^4) direct evaluation of the orthonormal DCT-II.
    fn brute_dct(img: &Image) -> Vec<f64> {
        let (h, w) = (img.height(), img.width());
        let s = |k: usize, n: usize| if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        let mut out = vec![0.0; h * w];
        for u in 0..h {
            for v in 0..w {
                let mut acc = 0.0;
                for x in 0..h {
                    for y in 0..w {
                        acc += img.get(x, y, 0)
                            * (PI * (2 * x + 1) as f64 * u as f64 / (2 * h) as f64).cos()
                            * (PI * (2 * y + 1) as f64 * v as f64 / (2 * w) as f64).cos();
                    }
                }
                out[u * w + v] = s(u, h) * s(v, w) * acc;
            }
        }
        out
    }

    #[test]
    fn luminance_of_white_and_red() {
        let white = Image::filled(8, 8, 3, 1.0).unwrap();
        assert!(to_luminance(&white).unwrap().data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let red = Image::from_fn(8, 8, 3, |_, _, c| if c == 0 { 1.0 } else { 0.0 }).unwrap();
        assert!(to_luminance(&red).unwrap().data().iter().all(|&v| v == 0.299));
    }

    #[test]
    fn luminance_matches_scalar_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Image::from_fn(8, 8, 3, |_, _, _| rng.random::<f64>()).unwrap();
        let gray = to_luminance(&img).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let expect = 0.299 * img.get(i, j, 0) + 0.587 * img.get(i, j, 1) + 0.114 * img.get(i, j, 2);
                assert_eq!(gray.get(i, j, 0), expect);
            }
        }
        assert!(matches!(to_luminance(&gray), Err(Error::Dimension(_))));
    }

    #[test]
    fn constant_image_is_dc_only() {
        let c = 0.7;
        let n = 16;
        let coeffs = dct2d(&Image::filled(n, n, 1, c).unwrap()).unwrap();
        assert!((coeffs.get(0, 0) - c * n as f64).abs() < 1e-12);
        for (idx, &v) in coeffs.data().iter().enumerate().skip(1) {
            assert!(v.abs() < 1e-12, "coefficient {idx} = {v}");
        }
    }

    #[test]
    fn matches_brute_force_and_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = random_gray(&mut rng, 8, 8);
        let fast = dct2d(&img).unwrap();
        for (a, b) in fast.data().iter().zip(brute_dct(&img)) {
            assert!((a - b).abs() < 1e-9);
        }
        let big = random_gray(&mut rng, 32, 32);
        let back = idct2d(&dct2d(&big).unwrap()).unwrap();
        let err = big.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "round trip error {err}");
    }

    #[test]
    fn rectangular_grids_are_supported() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_gray(&mut rng, 8, 12);
        let fast = dct2d(&img).unwrap();
        for (a, b) in fast.data().iter().zip(brute_dct(&img)) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn filter_spec_rejects_out_of_range_alpha() {
        assert!(matches!(FilterSpec::new(-0.1), Err(Error::Config(_))));
        assert!(matches!(FilterSpec::new(1.01), Err(Error::Config(_))));
        assert!(FilterSpec::new(0.0).is_ok());
        assert_eq!(FilterSpec::default().alpha(), 0.33);
    }

    #[test]
    fn highpass_triangle_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let coeffs = dct2d(&random_gray(&mut rng, 12, 12)).unwrap();
        assert_eq!(highpass_filter(&coeffs, FilterSpec::new(0.0).unwrap()), coeffs);

        let f = highpass_filter(&coeffs, FilterSpec::new(0.33).unwrap());
        let mut zeroed = 0;
        for i in 0..12 {
            for j in 0..12 {
                if i + j < 4 {
                    assert_eq!(f.get(i, j), 0.0);
                    zeroed += 1;
                } else {
                    assert_eq!(f.get(i, j), coeffs.get(i, j));
                }
            }
        }
        assert_eq!(zeroed, 10);

        let full = highpass_filter(&coeffs, FilterSpec::new(1.0).unwrap());
        for i in 0..12 {
            for j in 0..12 {
                assert_eq!(full.get(i, j) == 0.0, i + j < 12);
            }
        }
    }

    #[test]
    fn frequency_cue_identity_and_dc_removal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = Image::from_fn(16, 16, 3, |_, _, _| rng.random::<f64>()).unwrap();
        let cue = frequency_cue(&img, FilterSpec::new(0.0).unwrap()).unwrap();
        let gray = to_luminance(&img).unwrap();
        for (a, b) in cue.data().iter().zip(gray.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        let flat = frequency_cue(&Image::filled(16, 16, 3, 0.4).unwrap(), FilterSpec::default()).unwrap();
        assert!(flat.data().iter().all(|v| v.abs() < 1e-12));
        assert_eq!((flat.height(), flat.width(), flat.channels()), (16, 16, 1));
    }

    #[test]
    fn pasted_patch_boundary_carries_high_frequency_energy() {
        // smooth gradient background with a bright square pasted at rows/cols 12..28
        let n = 40;
        let img = Image::from_fn(n, n, 3, |i, j, _| {
            if (12..28).contains(&i) && (12..28).contains(&j) {
                0.95
            } else {
                0.2 + 0.3 * (i + j) as f64 / (2 * n) as f64
            }
        })
        .unwrap();
        let cue = frequency_cue(&img, FilterSpec::default()).unwrap();
        let near_edge = |x: usize| (10..14).contains(&x) || (26..30).contains(&x);
        let inside = |x: usize| (10..30).contains(&x);
        let (mut band, mut nb, mut rest, mut nr) = (0.0, 0, 0.0, 0);
        for i in 0..n {
            for j in 0..n {
                let v = cue.get(i, j, 0).abs();
                let in_band = inside(i) && inside(j) && (near_edge(i) || near_edge(j));
                if in_band {
                    band += v;
                    nb += 1;
                } else {
                    rest += v;
                    nr += 1;
                }
            }
        }
        assert!(band / nb as f64 > rest / nr as f64);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn parseval_and_linearity(seed in any::<u64>(), h in 8usize..20, w in 8usize..20, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_gray(&mut rng, h, w);
            let y = random_gray(&mut rng, h, w);
            let cx = dct2d(&x).unwrap();
            let e_px: f64 = x.data().iter().map(|v| v * v).sum();
            let e_co: f64 = cx.data().iter().map(|v| v * v).sum();
            prop_assert!(((e_px - e_co) / e_px).abs() < 1e-9);

            let combo = Image::new(h, w, 1, x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
            let cy = dct2d(&y).unwrap();
            let cc = dct2d(&combo).unwrap();
            for ((l, p), q) in cc.data().iter().zip(cx.data()).zip(cy.data()) {
                prop_assert!((l - (a * p + b * q)).abs() < 1e-9);
            }
        }

        #[test]
        fn filter_is_monotone_and_idempotent(a1 in 0.0f64..=1.0, a2 in 0.0f64..=1.0, h in 8usize..24, w in 8usize..24) {
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            let ones = DctCoefficients::new(h, w, vec![1.0; h * w]).unwrap();
            let f_lo = highpass_filter(&ones, FilterSpec::new(lo).unwrap());
            let f_hi = highpass_filter(&ones, FilterSpec::new(hi).unwrap());
            for (l, h) in f_lo.data().iter().zip(f_hi.data()) {
                // zeroed under lo implies zeroed under hi
                prop_assert!(!(*l == 0.0 && *h != 0.0));
            }
            let spec = FilterSpec::new(hi).unwrap();
            prop_assert_eq!(highpass_filter(&f_hi, spec), f_hi);
        }
    }
}
