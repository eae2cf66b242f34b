//! Parameterized layers over the tape.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diff::{ParamId, ParamStore, StatUpdate, Tape, Tensor, Var};
use crate::error::Result;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Controls batchnorm statistics only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

fn he_normal<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
        bias: bool,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.trainable(
            format!("{name}.weight"),
            he_normal(&[kernel, kernel, cin, cout], kernel * kernel * cin, rng),
        );
        let bias = bias.then(|| store.trainable(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.trainable(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.trainable(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.buffer(format!("{name}.running_var"), Tensor::full(&[channels], 1.0)),
        }
    }

    /// In training mode the batch statistics are queued on the tape; apply
    /// them with [`StatUpdate::apply`] once the step is done.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        match mode {
            Mode::Train => {
                let (y, batch_mean, batch_var) = tape.batchnorm_train(x, gamma, beta, BN_EPS)?;
                tape.record_stat_update(StatUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    batch_mean,
                    batch_var,
                    momentum: BN_MOMENTUM,
                });
                Ok(y)
            }
            Mode::Eval => tape.batchnorm_eval(
                x,
                gamma,
                beta,
                store.value(self.running_mean).data(),
                store.value(self.running_var).data(),
                BN_EPS,
            ),
        }
    }
}

/// Convolution followed by batchnorm (no convolution bias).
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBn {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, kernel: usize, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), kernel, cin, cout, false, 1, rng),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv.forward(tape, store, x)?;
        self.bn.forward(tape, store, y, mode)
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        Self {
            weight: store.trainable(format!("{name}.weight"), he_normal(&[din, dout], din, rng)),
            bias: store.trainable(format!("{name}.bias"), Tensor::zeros(&[dout])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.dense(x, w, Some(b))
    }
}
