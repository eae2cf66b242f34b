//! Minimal reverse-mode differentiation over dense `f64` tensors.

pub mod checkpoint;
pub mod gradcheck;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use params::{ParamId, ParamKind, ParamStore, Parameter};
pub use tape::{Gradients, StatUpdate, Tape, Var};
pub use tensor::Tensor;

/// Guard used wherever a norm ends up in a denominator.
pub const NORM_EPS: f64 = 1e-8;
