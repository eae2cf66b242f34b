//! Central finite-difference gradient checks.
//!
//! The numeric side only evaluates forward values, so it is independent of
//! every backward rule it checks. Relative error is
//! `|analytic - numeric| / max(|analytic|, |numeric|, FLOOR)`.

use rand::Rng;

use crate::diff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    /// Tensor label (input index or parameter name).
    pub target: String,
    pub position: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn relative_error(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

pub fn max_relative_error(probes: &[Probe]) -> f64 {
    probes.iter().map(Probe::relative_error).fold(0.0, f64::max)
}

fn scalar(tape: &Tape, loss: Var) -> Result<f64> {
    let v = tape.value(loss);
    if v.numel() != 1 {
        return Err(Error::Usage(format!("loss must be scalar, got {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Checks `d f / d inputs` at `probes` random positions of every input
/// (every position when an input is smaller than `probes`).
pub fn check_inputs<F, R>(inputs: &[Tensor], f: F, probes: usize, step: f64, rng: &mut R) -> Result<Vec<Probe>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    R: Rng,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    scalar(&tape, loss)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.input(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        scalar(&tape, loss)
    };

    let mut out = Vec::new();
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for pos in positions(input.numel(), probes, rng) {
            let orig = input.data()[pos];
            work[k].data_mut()[pos] = orig + step;
            let up = eval(&work)?;
            work[k].data_mut()[pos] = orig - step;
            let down = eval(&work)?;
            work[k].data_mut()[pos] = orig;
            out.push(Probe {
                target: format!("input{k}"),
                position: pos,
                analytic: analytic[k].data()[pos],
                numeric: (up - down) / (2.0 * step),
            });
        }
    }
    Ok(out)
}

/// Checks `d f / d param` for the given parameters of `store`.
pub fn check_params<F, R>(
    store: &ParamStore,
    ids: &[ParamId],
    f: F,
    probes: usize,
    step: f64,
    rng: &mut R,
) -> Result<Vec<Probe>>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
    R: Rng,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    scalar(&tape, loss)?;
    let grads = tape.backward(loss)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, s)?;
        scalar(&tape, loss)
    };

    let mut work = store.clone();
    let mut out = Vec::new();
    for &id in ids {
        let numel = store.value(id).numel();
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        for pos in positions(numel, probes, rng) {
            let orig = store.value(id).data()[pos];
            work.value_mut(id).data_mut()[pos] = orig + step;
            let up = eval(&work)?;
            work.value_mut(id).data_mut()[pos] = orig - step;
            let down = eval(&work)?;
            work.value_mut(id).data_mut()[pos] = orig;
            out.push(Probe {
                target: store.name(id).to_string(),
                position: pos,
                analytic: analytic.data()[pos],
                numeric: (up - down) / (2.0 * step),
            });
        }
    }
    Ok(out)
}

fn positions<R: Rng>(numel: usize, probes: usize, rng: &mut R) -> Vec<usize> {
    if numel <= probes {
        (0..numel).collect()
    } else {
        (0..probes).map(|_| rng.random_range(0..numel)).collect()
    }
}
