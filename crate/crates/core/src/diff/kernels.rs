//! Dense kernels behind the tape: matrix products and im2col convolution.

use rayon::prelude::*;

/// `c = beta * c + a * b` for row-major operands given by explicit strides.
///
/// `a` is `m x k` with strides `(rsa, csa)`, `b` is `k x n` with `(rsb, csb)`,
/// `c` is a contiguous row-major `m x n` buffer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const TILE_VALUES: usize = 1 << 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Stride-1 convolutions with enough input channels run as one matrix
    /// product per kernel tap over a zero-padded copy of the input. Output
    /// pixel `(oy, ox)` lives at row `oy * pw + ox` of a buffer whose rows
    /// follow the padded width `pw`, so every tap reads a contiguous window;
    /// the `pw - wo` rows per line that straddle the border are discarded.
    fn uses_taps(&self) -> bool {
        self.stride == 1 && !self.is_pointwise() && self.cin >= 8
    }

    fn padded_width(&self) -> usize {
        self.width + 2 * self.pad
    }

    fn padded(&self, xs: &[f64]) -> Vec<f64> {
        let (pw, cin, p) = (self.padded_width(), self.cin, self.pad);
        let mut buf = vec![0.0; (self.height + 2 * p) * pw * cin];
        for iy in 0..self.height {
            let dst = ((iy + p) * pw + p) * cin;
            buf[dst..dst + self.width * cin].copy_from_slice(&xs[iy * self.width * cin..(iy + 1) * self.width * cin]);
        }
        buf
    }

    /// `(padded input offset, weight offset)` of every kernel row. Consecutive
    /// windows overlap by `cin`, so a row's taps read as one `kw * cin` wide
    /// operand with row stride `cin`.
    fn kernel_rows(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let pw = self.padded_width();
        (0..self.kh).map(move |ky| (ky * pw * self.cin, ky * self.kw * self.cin * self.cout))
    }

    /// `(padded input offset, weight offset)` of every kernel tap.
    fn taps(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let pw = self.padded_width();
        (0..self.kh).flat_map(move |ky| {
            (0..self.kw).map(move |kx| ((ky * pw + kx) * self.cin, (ky * self.kw + kx) * self.cin * self.cout))
        })
    }

    /// Output lines per band, sized so a band's buffers stay in cache.
    fn band_rows(&self) -> usize {
        (TILE_VALUES / (self.padded_width() * self.cin.max(self.cout))).clamp(1, self.out_height())
    }

    fn bands(&self) -> impl Iterator<Item = (usize, usize)> {
        let (b, ho) = (self.band_rows(), self.out_height());
        (0..ho).step_by(b).map(move |y| (y, (y + b).min(ho)))
    }

    fn in_len(&self) -> usize {
        self.height * self.width * self.cin
    }

    fn out_len(&self) -> usize {
        self.rows() * self.cout
    }

    /// Output-row tile size keeping the column buffer cache-resident.
    fn tile(&self) -> usize {
        (TILE_VALUES / self.patch()).clamp(32, self.rows().max(32))
    }

    /// Column rows for output pixels `r0..r1` (flattened `oy * wo + ox`).
    fn im2col(&self, x: &[f64], r0: usize, r1: usize, cols: &mut [f64]) {
        let (wo, patch) = (self.out_width(), self.patch());
        for r in r0..r1 {
            let (oy, ox) = (r / wo, r % wo);
            {
                let row = &mut cols[(r - r0) * patch..(r - r0 + 1) * patch];
                for ky in 0..self.kh {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    for kx in 0..self.kw {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        let dst = &mut row[(ky * self.kw + kx) * self.cin..(ky * self.kw + kx + 1) * self.cin];
                        if iy < 0 || ix < 0 || iy >= self.height as isize || ix >= self.width as isize {
                            dst.fill(0.0);
                        } else {
                            let src = (iy as usize * self.width + ix as usize) * self.cin;
                            dst.copy_from_slice(&x[src..src + self.cin]);
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], r0: usize, r1: usize, dx: &mut [f64]) {
        let (wo, patch) = (self.out_width(), self.patch());
        for r in r0..r1 {
            let (oy, ox) = (r / wo, r % wo);
            {
                let row = &cols[(r - r0) * patch..(r - r0 + 1) * patch];
                for ky in 0..self.kh {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.height as isize {
                        continue;
                    }
                    for kx in 0..self.kw {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.width as isize {
                            continue;
                        }
                        let src = &row[(ky * self.kw + kx) * self.cin..(ky * self.kw + kx + 1) * self.cin];
                        let dst = (iy as usize * self.width + ix as usize) * self.cin;
                        for (d, s) in dx[dst..dst + self.cin].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        let (rows, patch, cout) = (self.rows(), self.patch(), self.cout);
        let mut out = vec![0.0; self.batch * self.out_len()];
        out.par_chunks_mut(self.out_len())
            .zip(x.par_chunks(self.in_len()))
            .for_each(|(o, xs)| {
                if let Some(b) = bias {
                    for px in o.chunks_exact_mut(cout) {
                        px.copy_from_slice(b);
                    }
                }
                let beta = if bias.is_some() { 1.0 } else { 0.0 };
                if self.uses_taps() {
                    let (pw, wo, cin) = (self.padded_width(), self.out_width(), self.cin);
                    let padded = self.padded(xs);
                    let mut acc = vec![0.0; self.band_rows() * pw * cout];
                    for (oy0, oy1) in self.bands() {
                        let m = (oy1 - oy0 - 1) * pw + wo;
                        let acc = &mut acc[..m * cout];
                        acc.fill(0.0);
                        for (xo, wo_) in self.kernel_rows() {
                            let a = &padded[oy0 * pw * cin + xo..];
                            gemm(m, self.kw * cin, cout, a, (cin, 1), &w[wo_..], (cout, 1), 1.0, acc);
                        }
                        for oy in oy0..oy1 {
                            let src = &acc[(oy - oy0) * pw * cout..((oy - oy0) * pw + wo) * cout];
                            for (d, a) in o[oy * wo * cout..(oy + 1) * wo * cout].iter_mut().zip(src) {
                                *d = beta * *d + a;
                            }
                        }
                    }
                } else if self.is_pointwise() {
                    gemm(rows, patch, cout, xs, (patch, 1), w, (cout, 1), beta, o);
                } else {
                    let tile = self.tile();
                    let mut cols = vec![0.0; tile * patch];
                    for r0 in (0..rows).step_by(tile) {
                        let r1 = (r0 + tile).min(rows);
                        self.im2col(xs, r0, r1, &mut cols);
                        gemm(r1 - r0, patch, cout, &cols, (patch, 1), w, (cout, 1), beta, &mut o[r0 * cout..r1 * cout]);
                    }
                }
            });
        out
    }

    /// Returns `(dx, dw, db)`; only the requested gradients are computed.
    pub fn backward(
        &self,
        x: &[f64],
        w: &[f64],
        dout: &[f64],
        want_dx: bool,
        want_dw: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
        let (rows, patch, cout) = (self.rows(), self.patch(), self.cout);
        let mut db = vec![0.0; cout];
        for px in dout.chunks_exact(cout) {
            for (d, g) in db.iter_mut().zip(px) {
                *d += g;
            }
        }
        let mut dx = if want_dx {
            vec![0.0; self.batch * self.in_len()]
        } else {
            Vec::new()
        };
        let per_sample = |n: usize, dxn: Option<&mut [f64]>| -> Option<Vec<f64>> {
            let xs = &x[n * self.in_len()..(n + 1) * self.in_len()];
            let go = &dout[n * self.out_len()..(n + 1) * self.out_len()];
            let mut dw_n = None;
            if self.uses_taps() {
                let (pw, wo, cin, p) = (self.padded_width(), self.out_width(), self.cin, self.pad);
                let padded = want_dw.then(|| self.padded(xs));
                let mut dw = want_dw.then(|| vec![0.0; patch * cout]);
                let mut dpad = dxn.is_some().then(|| vec![0.0; (self.height + 2 * p) * pw * cin]);
                let mut g = vec![0.0; self.band_rows() * pw * cout];
                for (oy0, oy1) in self.bands() {
                    let m = (oy1 - oy0 - 1) * pw + wo;
                    let g = &mut g[..m * cout];
                    g.fill(0.0);
                    for oy in oy0..oy1 {
                        g[(oy - oy0) * pw * cout..((oy - oy0) * pw + wo) * cout]
                            .copy_from_slice(&go[oy * wo * cout..(oy + 1) * wo * cout]);
                    }
                    let base = oy0 * pw * cin;
                    if let (Some(dw), Some(padded)) = (dw.as_mut(), padded.as_ref()) {
                        let k = self.kw * cin;
                        for (xo, wo_) in self.kernel_rows() {
                            gemm(k, m, cout, &padded[base + xo..], (1, cin), g, (cout, 1), 1.0, &mut dw[wo_..wo_ + k * cout]);
                        }
                    }
                    if let Some(dpad) = dpad.as_mut() {
                        for (xo, wo_) in self.taps() {
                            gemm(m, cout, cin, g, (cout, 1), &w[wo_..], (1, cout), 1.0, &mut dpad[base + xo..]);
                        }
                    }
                }
                if let (Some(dxn), Some(dpad)) = (dxn, dpad) {
                    for iy in 0..self.height {
                        let src = ((iy + p) * pw + p) * cin;
                        for (d, v) in dxn[iy * self.width * cin..(iy + 1) * self.width * cin]
                            .iter_mut()
                            .zip(&dpad[src..src + self.width * cin])
                        {
                            *d += v;
                        }
                    }
                }
                dw_n = dw;
            } else if self.is_pointwise() {
                if want_dw {
                    let mut dw = vec![0.0; patch * cout];
                    gemm(patch, rows, cout, xs, (1, patch), go, (cout, 1), 0.0, &mut dw);
                    dw_n = Some(dw);
                }
                if let Some(dxn) = dxn {
                    gemm(rows, cout, patch, go, (cout, 1), w, (1, cout), 0.0, dxn);
                }
            } else {
                let tile = self.tile();
                let mut cols = vec![0.0; tile * patch];
                let mut dw = want_dw.then(|| vec![0.0; patch * cout]);
                let mut dxn = dxn;
                for r0 in (0..rows).step_by(tile) {
                    let r1 = (r0 + tile).min(rows);
                    let g = &go[r0 * cout..r1 * cout];
                    if let Some(dw) = dw.as_mut() {
                        self.im2col(xs, r0, r1, &mut cols);
                        gemm(patch, r1 - r0, cout, &cols, (1, patch), g, (cout, 1), 1.0, dw);
                    }
                    if let Some(dxn) = dxn.as_deref_mut() {
                        gemm(r1 - r0, cout, patch, g, (cout, 1), w, (1, cout), 0.0, &mut cols);
                        self.col2im_add(&cols, r0, r1, dxn);
                    }
                }
                dw_n = dw;
            }
            dw_n
        };
        let partials: Vec<Option<Vec<f64>>> = if want_dx {
            dx.par_chunks_mut(self.in_len())
                .enumerate()
                .map(|(n, dxn)| per_sample(n, Some(dxn)))
                .collect()
        } else {
            (0..self.batch)
                .into_par_iter()
                .map(|n| per_sample(n, None))
                .collect()
        };
        // fixed summation order keeps the result independent of thread count
        let dw = want_dw.then(|| {
            let mut acc = vec![0.0; patch * cout];
            for p in partials.into_iter().flatten() {
                for (a, v) in acc.iter_mut().zip(p) {
                    *a += v;
                }
            }
            acc
        });
        (want_dx.then_some(dx), dw, db)
    }
}

/// Per-axis bilinear sampling table with half-pixel centers.
pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}
