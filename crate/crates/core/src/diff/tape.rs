//! Reverse-mode tape.
//!
//! Every operation appends a node holding its forward value and enough
//! context to push gradients to its inputs. [`Tape::backward`] walks the
//! nodes in exact reverse order, summing gradients across consumers.

use std::collections::BTreeMap;

use crate::diff::kernels::{self, gemm, ConvGeometry};
use crate::diff::{ParamId, ParamStore, Tensor};
use crate::error::{ensure_dims, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Relu(usize),
    Gate {
        x: usize,
        open: Vec<bool>,
    },
    Sigmoid(usize),
    Ln(usize),
    Sqrt {
        x: usize,
        eps: f64,
    },
    Clamp {
        x: usize,
        lo: f64,
        hi: f64,
    },
    Affine {
        x: usize,
        scale: f64,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul {
        a: usize,
        b: usize,
        broadcast: Broadcast,
    },
    Concat(Vec<usize>),
    Slice {
        x: usize,
        start: usize,
        width: usize,
    },
    Reshape(usize),
    Dense {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Resize {
        x: usize,
    },
    AvgPool2(usize),
    GlobalPool(usize),
    Gather {
        x: usize,
        index: Vec<usize>,
    },
    L2Normalize {
        x: usize,
        eps: f64,
    },
    Gram(usize),
    SumTrailing(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    /// `b` has a trailing extent of 1 and is broadcast over `a`'s last axis.
    RightLast,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Batch statistics recorded by a training-mode batchnorm, applied to the
/// running buffers by the caller after the forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct StatUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance.
    pub batch_var: Vec<f64>,
    pub momentum: f64,
}

impl StatUpdate {
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply(&self, store: &mut ParamStore) {
        for (id, batch) in [(self.running_mean, &self.batch_mean), (self.running_var, &self.batch_var)] {
            for (r, b) in store.value_mut(id).data_mut().iter_mut().zip(batch) {
                *r = (1.0 - self.momentum) * *r + self.momentum * b;
            }
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    stat_updates: Vec<StatUpdate>,
    gates: Gates,
}

/// ReLU switching patterns, for finite differences that stay on one linear piece.
#[derive(Debug, Default)]
enum Gates {
    #[default]
    Off,
    Record(Vec<Vec<bool>>),
    Replay(std::vec::IntoIter<Vec<bool>>),
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: BTreeMap<usize, Tensor>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    ensure_dims!(
        a.shape() == b.shape(),
        "{op}: operand shapes {:?} and {:?} differ",
        a.shape(),
        b.shape()
    );
    Ok(())
}

fn rank4(op: &str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    ensure_dims!(t.rank() == 4, "{op}: expected an NHWC tensor, got shape {:?}", t.shape());
    Ok((t.dim(0), t.dim(1), t.dim(2), t.dim(3)))
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, true, None)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false, None)
    }

    /// Copies a stored parameter onto the tape; trainable entries track gradients.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let trainable = p.kind == crate::diff::ParamKind::Trainable;
        self.leaf(p.value.clone(), trainable, Some(id))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    pub(crate) fn record_stat_update(&mut self, update: StatUpdate) {
        self.stat_updates.push(update);
    }

    fn val(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    // ---- convolution & normalization -------------------------------------

    /// Cross-correlation of NHWC `x` with a `[kh, kw, cin, cout]` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, h, wd, cin) = rank4("conv2d", self.val(x))?;
        let (kh, kw, kcin, cout) = rank4("conv2d kernel", self.val(w))?;
        ensure_dims!(kcin == cin, "conv2d: kernel expects {kcin} input channels, input has {cin}");
        ensure_dims!(stride >= 1, "conv2d: stride must be positive");
        ensure_dims!(
            kh <= h + 2 * pad && kw <= wd + 2 * pad,
            "conv2d: kernel {kh}x{kw} exceeds padded input {}x{}",
            h + 2 * pad,
            wd + 2 * pad
        );
        if let Some(b) = b {
            ensure_dims!(
                self.val(b).shape() == [cout],
                "conv2d: bias shape {:?}, expected [{cout}]",
                self.val(b).shape()
            );
        }
        let geom = ConvGeometry {
            batch: n,
            height: h,
            width: wd,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad,
        };
        let out = geom.forward(
            self.val(x).data(),
            self.val(w).data(),
            b.map(|b| self.val(b).data()),
        );
        let value = Tensor::new(&[n, geom.out_height(), geom.out_width(), cout], out)?;
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|b| b.0));
        Ok(self.push(
            value,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geom,
            },
            &inputs,
        ))
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let c = self.val(x).last_dim();
        ensure_dims!(self.val(x).rank() >= 2, "batchnorm: input needs a batch axis");
        ensure_dims!(
            self.val(gamma).shape() == [c] && self.val(beta).shape() == [c],
            "batchnorm: affine parameters must have shape [{c}]"
        );
        Ok(c)
    }

    /// Normalizes each channel (last axis) with batch statistics.
    /// Returns the output and the `(mean, unbiased variance)` of the batch.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let c = self.bn_check(x, gamma, beta)?;
        let xs = self.val(x).data();
        let count = xs.len() / c;
        let mut mean = vec![0.0; c];
        for px in xs.chunks_exact(c) {
            for (m, v) in mean.iter_mut().zip(px) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; c];
        for px in xs.chunks_exact(c) {
            for ((s, v), m) in var.iter_mut().zip(px).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let unbiased: Vec<f64> = var.iter().map(|s| s / (count.max(2) - 1) as f64).collect();
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / count as f64 + eps).sqrt()).collect();
        let (value, xhat) = self.bn_apply(x, gamma, beta, &mean, &inv_std);
        let shape = self.val(x).shape().to_vec();
        let value = Tensor::new(&shape, value)?;
        let var = self.push(
            value,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                training: true,
            },
            &[x.0, gamma.0, beta.0],
        );
        Ok((var, mean, unbiased))
    }

    /// Normalizes with fixed (running) statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        variance: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let c = self.bn_check(x, gamma, beta)?;
        ensure_dims!(
            mean.len() == c && variance.len() == c,
            "batchnorm: running statistics must have {c} entries"
        );
        let inv_std: Vec<f64> = variance.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (value, xhat) = self.bn_apply(x, gamma, beta, mean, &inv_std);
        let shape = self.val(x).shape().to_vec();
        let value = Tensor::new(&shape, value)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                training: false,
            },
            &[x.0, gamma.0, beta.0],
        ))
    }

    fn bn_apply(&self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let xs = self.val(x).data();
        let c = mean.len();
        let g = self.val(gamma).data();
        let b = self.val(beta).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for ((px, hx), o) in xs.chunks_exact(c).zip(xhat.chunks_exact_mut(c)).zip(out.chunks_exact_mut(c)) {
            for ch in 0..c {
                let h = (px[ch] - mean[ch]) * inv_std[ch];
                hx[ch] = h;
                o[ch] = g[ch] * h + b[ch];
            }
        }
        (out, xhat)
    }

    // ---- elementwise -----------------------------------------------------

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.val(x).data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.val(x).shape(), data).expect("same shape");
        self.push(value, op, &[x.0])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        match &mut self.gates {
            Gates::Off => {}
            Gates::Record(log) => log.push(self.nodes[x.0].value.data().iter().map(|&v| v > 0.0).collect()),
            Gates::Replay(it) => {
                let open = it.next().expect("replayed tape runs more relus than were recorded");
                assert_eq!(open.len(), self.val(x).numel(), "replayed relu gate has the wrong size");
                let data = self.val(x).data().iter().zip(&open).map(|(&v, &o)| if o { v } else { 0.0 }).collect();
                let value = Tensor::new(self.val(x).shape(), data).expect("same shape");
                return self.push(value, Op::Gate { x: x.0, open }, &[x.0]);
            }
        }
        self.unary(x, |v| v.max(0.0), Op::Relu(x.0))
    }

    /// From here on, remembers which entries every `relu` lets through.
    pub fn record_relu_gates(&mut self) {
        self.gates = Gates::Record(Vec::new());
    }

    /// Patterns recorded since [`Tape::record_relu_gates`], in call order.
    pub fn take_relu_gates(&mut self) -> Vec<Vec<bool>> {
        match std::mem::take(&mut self.gates) {
            Gates::Record(log) => log,
            _ => Vec::new(),
        }
    }

    /// Makes the `i`-th `relu` pass exactly the entries open in `gates[i]`
    /// instead of the positive ones. A network evaluated this way is smooth
    /// around the point the gates were recorded at and has the same gradient
    /// there, so finite differences do not trip over ReLU kinks.
    pub fn replay_relu_gates(&mut self, gates: Vec<Vec<bool>>) {
        self.gates = Gates::Replay(gates.into_iter());
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x.0))
    }

    /// Natural logarithm; the caller keeps inputs strictly positive.
    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln(x.0))
    }

    /// Square root of a non-negative input. The derivative uses
    /// `0.5 / max(sqrt(x), eps)` so it stays finite at zero.
    pub fn sqrt(&mut self, x: Var, eps: f64) -> Var {
        self.unary(x, |v| v.max(0.0).sqrt(), Op::Sqrt { x: x.0, eps })
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x: x.0, lo, hi })
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, |v| scale * v + shift, Op::Affine { x: x.0, scale })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.val(a), self.val(b))?;
        let data = self.val(a).data().iter().zip(self.val(b).data()).map(|(p, q)| p + q).collect();
        let value = Tensor::new(self.val(a).shape(), data)?;
        Ok(self.push(value, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.val(a), self.val(b))?;
        let data = self.val(a).data().iter().zip(self.val(b).data()).map(|(p, q)| p - q).collect();
        let value = Tensor::new(self.val(a).shape(), data)?;
        Ok(self.push(value, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    /// Elementwise product. Either operand may have a trailing extent of 1
    /// (with all other extents equal), in which case it is broadcast over the
    /// other operand's last axis.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        let (a, b, broadcast) = if sa == sb {
            (a, b, Broadcast::None)
        } else if sa.len() == sb.len() && sa[..sa.len() - 1] == sb[..sb.len() - 1] && sb[sb.len() - 1] == 1 {
            (a, b, Broadcast::RightLast)
        } else if sa.len() == sb.len() && sa[..sa.len() - 1] == sb[..sb.len() - 1] && sa[sa.len() - 1] == 1 {
            (b, a, Broadcast::RightLast)
        } else {
            return Err(Error::Dimension(format!("mul: cannot broadcast {sa:?} with {sb:?}")));
        };
        let av = self.val(a);
        let bv = self.val(b).data();
        let data = match broadcast {
            Broadcast::None => av.data().iter().zip(bv).map(|(p, q)| p * q).collect(),
            Broadcast::RightLast => {
                let c = av.last_dim();
                av.data()
                    .chunks_exact(c)
                    .zip(bv)
                    .flat_map(|(row, &s)| row.iter().map(move |v| v * s))
                    .collect()
            }
        };
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push(
            value,
            Op::Mul {
                a: a.0,
                b: b.0,
                broadcast,
            },
            &[a.0, b.0],
        ))
    }

    // ---- shape -----------------------------------------------------------

    /// Concatenates along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        ensure_dims!(!parts.is_empty(), "concat: no inputs");
        let lead = self.val(parts[0]).shape()[..self.val(parts[0]).rank() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.val(p).shape();
            ensure_dims!(
                s[..s.len() - 1] == lead[..],
                "concat: leading extents {:?} differ from {lead:?}",
                &s[..s.len() - 1]
            );
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.val(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(&shape, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(value, Op::Concat(ids.clone()), &ids))
    }

    /// Channels `[start, start + width)` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let c = self.val(x).last_dim();
        ensure_dims!(
            width > 0 && start + width <= c,
            "slice: [{start}, {}) out of range for {c} channels",
            start + width
        );
        let data = self
            .val(x)
            .data()
            .chunks_exact(c)
            .flat_map(|row| row[start..start + width].iter().copied())
            .collect();
        let mut shape = self.val(x).shape().to_vec();
        *shape.last_mut().unwrap() = width;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Slice { x: x.0, start, width }, &[x.0]))
    }

    /// Partitions the last axis into consecutive pieces of the given widths.
    pub fn split(&mut self, x: Var, widths: &[usize]) -> Result<Vec<Var>> {
        let c = self.val(x).last_dim();
        ensure_dims!(
            widths.iter().sum::<usize>() == c,
            "split: widths {widths:?} do not sum to {c}"
        );
        let mut start = 0;
        let mut out = Vec::with_capacity(widths.len());
        for &w in widths {
            out.push(self.slice_last(x, start, w)?);
            start += w;
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.val(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x.0), &[x.0]))
    }

    /// Collapses everything after the batch axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.val(x).dim(0);
        let rest = self.val(x).numel() / n.max(1);
        self.reshape(x, &[n, rest])
    }

    /// `x [n, in] * w [in, out] + b [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.val(x).shape(), self.val(w).shape());
        ensure_dims!(
            xs.len() == 2 && ws.len() == 2 && xs[1] == ws[0],
            "dense: cannot multiply {xs:?} by {ws:?}"
        );
        let (n, din, dout) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0; n * dout];
        let mut beta = 0.0;
        if let Some(b) = b {
            ensure_dims!(self.val(b).shape() == [dout], "dense: bias must have shape [{dout}]");
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(self.val(b).data());
            }
            beta = 1.0;
        }
        gemm(n, din, dout, self.val(x).data(), (din, 1), self.val(w).data(), (dout, 1), beta, &mut out);
        let value = Tensor::new(&[n, dout], out)?;
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|b| b.0));
        Ok(self.push(
            value,
            Op::Dense {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
            &inputs,
        ))
    }

    /// Bilinear resize of an NHWC tensor (half-pixel centers, edge clamp).
    pub fn resize_bilinear(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let (n, h, w, c) = rank4("resize", self.val(x))?;
        ensure_dims!(
            h > 0 && w > 0 && height > 0 && width > 0,
            "resize: zero extent ({h}x{w} -> {height}x{width})"
        );
        let ty = kernels::bilinear_taps(h, height);
        let tx = kernels::bilinear_taps(w, width);
        let xs = self.val(x).data();
        let mut out = vec![0.0; n * height * width * c];
        for b in 0..n {
            let src = &xs[b * h * w * c..(b + 1) * h * w * c];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let o = ((b * height + oy) * width + ox) * c;
                    let weights = [
                        ((y0, x0), (1.0 - fy) * (1.0 - fx)),
                        ((y0, x1), (1.0 - fy) * fx),
                        ((y1, x0), fy * (1.0 - fx)),
                        ((y1, x1), fy * fx),
                    ];
                    for ((yy, xx), wgt) in weights {
                        if wgt == 0.0 {
                            continue;
                        }
                        let s = (yy * w + xx) * c;
                        for ch in 0..c {
                            out[o + ch] += wgt * src[s + ch];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[n, height, width, c], out)?;
        Ok(self.push(value, Op::Resize { x: x.0 }, &[x.0]))
    }

    /// 2x2 average pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, h, w, c) = rank4("avg_pool2", self.val(x))?;
        ensure_dims!(h >= 2 && w >= 2, "avg_pool2: input {h}x{w} too small");
        let (ho, wo) = (h / 2, w / 2);
        let xs = self.val(x).data();
        let mut out = vec![0.0; n * ho * wo * c];
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let o = ((b * ho + oy) * wo + ox) * c;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let s = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c;
                        for ch in 0..c {
                            out[o + ch] += 0.25 * xs[s + ch];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[n, ho, wo, c], out)?;
        Ok(self.push(value, Op::AvgPool2(x.0), &[x.0]))
    }

    /// Spatial mean: `[n, h, w, c] -> [n, c]`.
    pub fn global_pool(&mut self, x: Var) -> Result<Var> {
        let (n, h, w, c) = rank4("global_pool", self.val(x))?;
        let xs = self.val(x).data();
        let mut out = vec![0.0; n * c];
        let inv = 1.0 / (h * w) as f64;
        for b in 0..n {
            for px in xs[b * h * w * c..(b + 1) * h * w * c].chunks_exact(c) {
                for (o, v) in out[b * c..(b + 1) * c].iter_mut().zip(px) {
                    *o += v * inv;
                }
            }
        }
        let value = Tensor::new(&[n, c], out)?;
        Ok(self.push(value, Op::GlobalPool(x.0), &[x.0]))
    }

    /// `out.data[i] = x.data[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let len = self.val(x).numel();
        ensure_dims!(
            index.len() == shape.iter().product::<usize>(),
            "gather: {} indices for shape {shape:?}",
            index.len()
        );
        ensure_dims!(index.iter().all(|&i| i < len), "gather: index out of range");
        let xs = self.val(x).data();
        let data = index.iter().map(|&i| xs[i]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Gather { x: x.0, index }, &[x.0]))
    }

    /// Divides every row (last axis) by `max(||row||, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let d = self.val(x).last_dim();
        ensure_dims!(d > 0, "l2_normalize: empty rows");
        let mut data = Vec::with_capacity(self.val(x).numel());
        for row in self.val(x).data().chunks_exact(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            data.extend(row.iter().map(|v| v / norm));
        }
        let value = Tensor::new(self.val(x).shape(), data)?;
        Ok(self.push(value, Op::L2Normalize { x: x.0, eps }, &[x.0]))
    }

    /// Batched Gram matrix: `[n, p, d] -> [n, p, p]`, exactly symmetric.
    pub fn gram(&mut self, x: Var) -> Result<Var> {
        let s = self.val(x).shape();
        ensure_dims!(s.len() == 3, "gram: expected [n, p, d], got {s:?}");
        let (n, p, d) = (s[0], s[1], s[2]);
        let xs = self.val(x).data();
        let mut out = vec![0.0; n * p * p];
        for b in 0..n {
            let rows = &xs[b * p * d..(b + 1) * p * d];
            let g = &mut out[b * p * p..(b + 1) * p * p];
            for i in 0..p {
                for j in i..p {
                    let dot: f64 = rows[i * d..(i + 1) * d]
                        .iter()
                        .zip(&rows[j * d..(j + 1) * d])
                        .map(|(u, v)| u * v)
                        .sum();
                    g[i * p + j] = dot;
                    g[j * p + i] = dot;
                }
            }
        }
        let value = Tensor::new(&[n, p, p], out)?;
        Ok(self.push(value, Op::Gram(x.0), &[x.0]))
    }

    /// Sums over every axis from `keep` on; `keep = 0` yields shape `[1]`.
    pub fn sum_trailing(&mut self, x: Var, keep: usize) -> Result<Var> {
        let shape = self.val(x).shape();
        ensure_dims!(keep < shape.len(), "sum: cannot keep {keep} axes of {shape:?}");
        let out_shape: Vec<usize> = if keep == 0 { vec![1] } else { shape[..keep].to_vec() };
        let groups: usize = out_shape.iter().product();
        let per = self.val(x).numel() / groups;
        let data = self.val(x).data().chunks_exact(per).map(|c| c.iter().sum()).collect();
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::SumTrailing(x.0), &[x.0]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.sum_trailing(x, 0).expect("rank >= 1")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.val(x).numel() as f64;
        let s = self.sum(x);
        self.affine(s, 1.0 / n, 0.0)
    }

    // ---- backward --------------------------------------------------------

    /// Back-propagates from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes;
        let lv = &nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let mut sink = Sink {
                nodes: &nodes,
                grads: &mut grads,
            };
            let v = |i: usize| nodes[i].value.data();
            match &node.op {
                Op::Leaf => {
                    let t = Tensor::new(node.value.shape(), g).expect("leaf shape");
                    if let Some(id) = node.param {
                        match out.params.get_mut(&id) {
                            Some(prev) => prev.data_mut().iter_mut().zip(t.data()).for_each(|(p, q)| *p += q),
                            None => {
                                out.params.insert(id, t.clone());
                            }
                        }
                    }
                    out.leaves.insert(idx, t);
                }
                Op::Conv2d { x, w, b, geom } => {
                    let (dx, dw, db) = geom.backward(
                        v(*x),
                        v(*w),
                        &g,
                        nodes[*x].requires_grad,
                        nodes[*w].requires_grad,
                    );
                    if let Some(dx) = dx {
                        sink.give(*x, dx);
                    }
                    if let Some(dw) = dw {
                        sink.give(*w, dw);
                    }
                    if let Some(b) = b {
                        sink.give(*b, db);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    training,
                } => {
                    let c = inv_std.len();
                    let count = (g.len() / c) as f64;
                    let gam = v(*gamma);
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ch in 0..c {
                            dgamma[ch] += gr[ch] * hr[ch];
                            dbeta[ch] += gr[ch];
                        }
                    }
                    sink.acc(*gamma, &|s| add_into(s, &dgamma));
                    sink.acc(*beta, &|s| add_into(s, &dbeta));
                    sink.acc(*x, &|s| {
                        for ((sr, gr), hr) in s.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(xhat.chunks_exact(c)) {
                            for ch in 0..c {
                                let dxhat = gr[ch] * gam[ch];
                                sr[ch] += if *training {
                                    // sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
                                    inv_std[ch] / count
                                        * (count * dxhat - gam[ch] * dbeta[ch] - hr[ch] * gam[ch] * dgamma[ch])
                                } else {
                                    dxhat * inv_std[ch]
                                };
                            }
                        }
                    });
                }
                Op::Relu(x) => sink.acc(*x, &|s| {
                    for ((d, gi), xi) in s.iter_mut().zip(&g).zip(v(*x)) {
                        if *xi > 0.0 {
                            *d += gi;
                        }
                    }
                }),
                Op::Gate { x, open } => sink.acc(*x, &|s| {
                    for ((d, gi), o) in s.iter_mut().zip(&g).zip(open) {
                        if *o {
                            *d += gi;
                        }
                    }
                }),
                Op::Sigmoid(x) => sink.acc(*x, &|s| {
                    for ((d, gi), y) in s.iter_mut().zip(&g).zip(node.value.data()) {
                        *d += gi * y * (1.0 - y);
                    }
                }),
                Op::Ln(x) => sink.acc(*x, &|s| {
                    for ((d, gi), xi) in s.iter_mut().zip(&g).zip(v(*x)) {
                        *d += gi / xi;
                    }
                }),
                Op::Sqrt { x, eps } => sink.acc(*x, &|s| {
                    for ((d, gi), y) in s.iter_mut().zip(&g).zip(node.value.data()) {
                        *d += gi * 0.5 / y.max(*eps);
                    }
                }),
                Op::Clamp { x, lo, hi } => sink.acc(*x, &|s| {
                    for ((d, gi), xi) in s.iter_mut().zip(&g).zip(v(*x)) {
                        if *xi >= *lo && *xi <= *hi {
                            *d += gi;
                        }
                    }
                }),
                Op::Affine { x, scale } => sink.acc(*x, &|s| {
                    for (d, gi) in s.iter_mut().zip(&g) {
                        *d += scale * gi;
                    }
                }),
                Op::Add(a, b) => {
                    sink.acc(*a, &|s| add_into(s, &g));
                    sink.give(*b, g);
                }
                Op::Sub(a, b) => {
                    sink.acc(*b, &|s| s.iter_mut().zip(&g).for_each(|(d, gi)| *d -= gi));
                    sink.give(*a, g);
                }
                Op::Mul { a, b, broadcast } => match broadcast {
                    Broadcast::None => {
                        sink.acc(*a, &|s| {
                            for ((d, gi), bi) in s.iter_mut().zip(&g).zip(v(*b)) {
                                *d += gi * bi;
                            }
                        });
                        sink.acc(*b, &|s| {
                            for ((d, gi), ai) in s.iter_mut().zip(&g).zip(v(*a)) {
                                *d += gi * ai;
                            }
                        });
                    }
                    Broadcast::RightLast => {
                        let c = nodes[*a].value.last_dim();
                        sink.acc(*a, &|s| {
                            for ((sr, gr), bi) in s.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(v(*b)) {
                                for (d, gi) in sr.iter_mut().zip(gr) {
                                    *d += gi * bi;
                                }
                            }
                        });
                        sink.acc(*b, &|s| {
                            for ((d, gr), ar) in s.iter_mut().zip(g.chunks_exact(c)).zip(v(*a).chunks_exact(c)) {
                                *d += gr.iter().zip(ar).map(|(p, q)| p * q).sum::<f64>();
                            }
                        });
                    }
                },
                Op::Concat(parts) => {
                    let total = node.value.last_dim();
                    let mut offset = 0;
                    for &p in parts {
                        let w = nodes[p].value.last_dim();
                        sink.acc(p, &|s| {
                            for (sr, gr) in s.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                                add_into(sr, &gr[offset..offset + w]);
                            }
                        });
                        offset += w;
                    }
                }
                Op::Slice { x, start, width } => {
                    let c = nodes[*x].value.last_dim();
                    sink.acc(*x, &|s| {
                        for (sr, gr) in s.chunks_exact_mut(c).zip(g.chunks_exact(*width)) {
                            add_into(&mut sr[*start..*start + *width], gr);
                        }
                    });
                }
                Op::Reshape(x) => sink.give(*x, g),
                Op::Dense { x, w, b } => {
                    let ws = nodes[*w].value.shape();
                    let (din, dout) = (ws[0], ws[1]);
                    let n = nodes[*x].value.dim(0);
                    sink.acc(*x, &|s| gemm(n, dout, din, &g, (dout, 1), v(*w), (1, dout), 1.0, s));
                    sink.acc(*w, &|s| gemm(din, n, dout, v(*x), (1, din), &g, (dout, 1), 1.0, s));
                    if let Some(b) = b {
                        sink.acc(*b, &|s| {
                            for row in g.chunks_exact(dout) {
                                add_into(s, row);
                            }
                        });
                    }
                }
                Op::Resize { x } => {
                    let xs = nodes[*x].value.shape();
                    let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
                    let (ho, wo) = (node.value.dim(1), node.value.dim(2));
                    let ty = kernels::bilinear_taps(h, ho);
                    let tx = kernels::bilinear_taps(w, wo);
                    sink.acc(*x, &|s| {
                        for b in 0..n {
                            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                                    let o = ((b * ho + oy) * wo + ox) * c;
                                    let weights = [
                                        ((y0, x0), (1.0 - fy) * (1.0 - fx)),
                                        ((y0, x1), (1.0 - fy) * fx),
                                        ((y1, x0), fy * (1.0 - fx)),
                                        ((y1, x1), fy * fx),
                                    ];
                                    for ((yy, xx), wgt) in weights {
                                        if wgt == 0.0 {
                                            continue;
                                        }
                                        let t = ((b * h + yy) * w + xx) * c;
                                        for ch in 0..c {
                                            s[t + ch] += wgt * g[o + ch];
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                Op::AvgPool2(x) => {
                    let xs = nodes[*x].value.shape();
                    let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
                    let (ho, wo) = (h / 2, w / 2);
                    sink.acc(*x, &|s| {
                        for b in 0..n {
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    let o = ((b * ho + oy) * wo + ox) * c;
                                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                        let t = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c;
                                        for ch in 0..c {
                                            s[t + ch] += 0.25 * g[o + ch];
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                Op::GlobalPool(x) => {
                    let xs = nodes[*x].value.shape();
                    let (n, hw, c) = (xs[0], xs[1] * xs[2], xs[3]);
                    let inv = 1.0 / hw as f64;
                    sink.acc(*x, &|s| {
                        for b in 0..n {
                            for px in s[b * hw * c..(b + 1) * hw * c].chunks_exact_mut(c) {
                                for (d, gi) in px.iter_mut().zip(&g[b * c..(b + 1) * c]) {
                                    *d += gi * inv;
                                }
                            }
                        }
                    });
                }
                Op::Gather { x, index } => sink.acc(*x, &|s| {
                    for (&i, gi) in index.iter().zip(&g) {
                        s[i] += gi;
                    }
                }),
                Op::L2Normalize { x, eps } => {
                    let d = node.value.last_dim();
                    sink.acc(*x, &|s| {
                        for ((sr, gr), (yr, xr)) in s
                            .chunks_exact_mut(d)
                            .zip(g.chunks_exact(d))
                            .zip(node.value.data().chunks_exact(d).zip(v(*x).chunks_exact(d)))
                        {
                            let norm = xr.iter().map(|q| q * q).sum::<f64>().sqrt();
                            if norm > *eps {
                                let proj: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                                for ((dd, gi), yi) in sr.iter_mut().zip(gr).zip(yr) {
                                    *dd += (gi - yi * proj) / norm;
                                }
                            } else {
                                for (dd, gi) in sr.iter_mut().zip(gr) {
                                    *dd += gi / eps;
                                }
                            }
                        }
                    });
                }
                Op::Gram(x) => {
                    let xs = nodes[*x].value.shape();
                    let (n, p, d) = (xs[0], xs[1], xs[2]);
                    sink.acc(*x, &|s| {
                        for b in 0..n {
                            let gb = &g[b * p * p..(b + 1) * p * p];
                            let sym: Vec<f64> = (0..p * p).map(|k| gb[k] + gb[(k % p) * p + k / p]).collect();
                            let rows = &v(*x)[b * p * d..(b + 1) * p * d];
                            gemm(p, p, d, &sym, (p, 1), rows, (d, 1), 1.0, &mut s[b * p * d..(b + 1) * p * d]);
                        }
                    });
                }
                Op::SumTrailing(x) => {
                    let per = nodes[*x].value.numel() / g.len();
                    sink.acc(*x, &|s| {
                        for (sr, gi) in s.chunks_exact_mut(per).zip(&g) {
                            sr.iter_mut().for_each(|d| *d += gi);
                        }
                    });
                }
            }
        }
        Ok(out)
    }
}

/// Gradient slots of the nodes still to be visited.
struct Sink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl Sink<'_> {
    fn acc(&mut self, target: usize, f: &dyn Fn(&mut [f64])) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let n = self.nodes[target].value.numel();
        f(self.grads[target].get_or_insert_with(|| vec![0.0; n]));
    }

    /// Like `acc` with an owned contribution, which becomes the slot when it is empty.
    fn give(&mut self, target: usize, g: Vec<f64>) {
        if !self.nodes[target].requires_grad {
            return;
        }
        match &mut self.grads[target] {
            Some(slot) => add_into(slot, &g),
            empty => *empty = Some(g),
        }
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
