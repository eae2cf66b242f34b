//! Training losses and evaluation metrics.
//!
//! All losses are built from tape primitives and averaged over the batch.

use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Tensor, Var, NORM_EPS};
use crate::error::{ensure_dims, Error, Result};

pub const PROB_CLAMP: f64 = 1e-7;
pub const DEFAULT_LAMBDA_SIM: f64 = 10.0;
pub const DEFAULT_LAMBDA_SEG: f64 = 1.0;
pub const ACC_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    lambda1: f64,
    lambda2: f64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        if !(lambda1 >= 0.0 && lambda2 >= 0.0 && lambda1.is_finite() && lambda2.is_finite()) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got ({lambda1}, {lambda2})"
            )));
        }
        Ok(Self { lambda1, lambda2 })
    }

    /// Weight of the similarity loss.
    pub fn lambda1(&self) -> f64 {
        self.lambda1
    }

    /// Weight of the segmentation loss.
    pub fn lambda2(&self) -> f64 {
        self.lambda2
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: DEFAULT_LAMBDA_SIM,
            lambda2: DEFAULT_LAMBDA_SEG,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_sim: f64,
    pub l_seg: f64,
    pub l_total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossBreakdown {
    pub fn combine(l_ce: f64, l_sim: f64, l_seg: f64, weights: LossWeights) -> Result<Self> {
        if ![l_ce, l_sim, l_seg].iter().all(|v| v.is_finite()) {
            return Err(Error::Usage("loss components must be finite".into()));
        }
        Ok(Self {
            l_ce,
            l_sim,
            l_seg,
            l_total: l_ce + weights.lambda1 * l_sim + weights.lambda2 * l_seg,
            lambda1: weights.lambda1,
            lambda2: weights.lambda2,
        })
    }
}

/// Differentiable `ce + lambda1 * sim + lambda2 * seg`; missing terms count as zero.
pub fn loss_total(tape: &mut Tape, ce: Var, sim: Option<Var>, seg: Option<Var>, weights: LossWeights) -> Result<Var> {
    let mut total = ce;
    for (term, w) in [(sim, weights.lambda1), (seg, weights.lambda2)] {
        if let Some(t) = term {
            let scaled = tape.affine(t, w, 0.0);
            total = tape.add(total, scaled)?;
        }
    }
    Ok(total)
}

/// Elementwise `-[y log p + (1 - y) log(1 - p)]` with `p` clamped away from 0 and 1.
fn binary_cross_entropy(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    ensure_dims!(
        tape.shape(pred) == target.shape(),
        "cross-entropy: prediction {:?} vs target {:?}",
        tape.shape(pred),
        target.shape()
    );
    let p = tape.clamp(pred, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let log_p = tape.ln(p);
    let one_minus = tape.affine(p, -1.0, 1.0);
    let log_q = tape.ln(one_minus);
    let y = tape.constant(target.clone());
    let not_y = tape.constant(Tensor::new(target.shape(), target.data().iter().map(|v| 1.0 - v).collect())?);
    let a = tape.mul(y, log_p)?;
    let b = tape.mul(not_y, log_q)?;
    let sum = tape.add(a, b)?;
    Ok(tape.affine(sum, -1.0, 0.0))
}

/// Batch mean of the binary cross-entropy between `y_hat` and labels.
pub fn loss_ce(tape: &mut Tape, y_hat: Var, labels: &Tensor) -> Result<Var> {
    let per = binary_cross_entropy(tape, y_hat, labels)?;
    Ok(tape.mean(per))
}

/// Per-pixel cross-entropy summed over each mask, divided by the pixel
/// count when `normalize` is set, then averaged over the batch.
pub fn loss_seg(tape: &mut Tape, mask_hat: Var, mask: &Tensor, normalize: bool) -> Result<Var> {
    let per = binary_cross_entropy(tape, mask_hat, mask)?;
    let n = mask.dim(0);
    let per_sample = tape.sum_trailing(per, 1)?;
    let pixels = (mask.numel() / n.max(1)) as f64;
    let scale = if normalize { 1.0 / (pixels * n as f64) } else { 1.0 / n as f64 };
    let total = tape.sum(per_sample);
    Ok(tape.affine(total, scale, 0.0))
}

/// Batch mean of the Frobenius norm `||s - s_hat||`.
pub fn loss_sim(tape: &mut Tape, s_hat: Var, target: &Tensor) -> Result<Var> {
    ensure_dims!(
        tape.shape(s_hat) == target.shape(),
        "similarity loss: prediction {:?} vs target {:?}",
        tape.shape(s_hat),
        target.shape()
    );
    let s = tape.constant(target.clone());
    let diff = tape.sub(s, s_hat)?;
    let sq = tape.mul(diff, diff)?;
    let per_sample = tape.sum_trailing(sq, 1)?;
    let norms = tape.sqrt(per_sample, NORM_EPS);
    Ok(tape.mean(norms))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc: f64,
    pub auc: f64,
    pub eer: f64,
    pub threshold: f64,
}

fn accuracy(scores: &[(f64, u8)]) -> f64 {
    let correct = scores
        .iter()
        .filter(|(s, y)| u8::from(*s >= ACC_THRESHOLD) == *y)
        .count();
    correct as f64 / scores.len().max(1) as f64
}

/// ROC points `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, tied scores merged.
pub fn roc_curve(scores: &[(f64, u8)]) -> Vec<(f64, f64)> {
    let mut sorted: Vec<(f64, u8)> = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let pos = sorted.iter().filter(|(_, y)| *y == 1).count() as f64;
    let neg = sorted.len() as f64 - pos;
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        points.push((fp / neg, tp / pos));
    }
    points
}

/// ACC at 0.5, trapezoidal ROC AUC, and the interpolated equal-error rate.
/// Labels are 0 (real) or 1 (forged); `y_hat` is the forged probability.
pub fn metrics(scores: &[(f64, u8)]) -> Result<EvalReport> {
    let acc = accuracy(scores);
    let pos = scores.iter().filter(|(_, y)| *y == 1).count();
    if pos == 0 || pos == scores.len() {
        return Err(Error::SingleClass { acc });
    }
    let roc = roc_curve(scores);
    let auc = roc
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum::<f64>();

    // fpr - fnr rises from -1 to 1 along the curve
    let gap = |(fpr, tpr): (f64, f64)| fpr - (1.0 - tpr);
    let mut eer = 1.0;
    for w in roc.windows(2) {
        let (g0, g1) = (gap(w[0]), gap(w[1]));
        if g1 >= 0.0 {
            eer = if g1 == g0 {
                w[1].0
            } else {
                let t = -g0 / (g1 - g0);
                w[0].0 + t * (w[1].0 - w[0].0)
            };
            break;
        }
    }
    Ok(EvalReport {
        acc,
        auc: auc.clamp(0.0, 1.0),
        eer: eer.clamp(0.0, 1.0),
        threshold: ACC_THRESHOLD,
    })
}
