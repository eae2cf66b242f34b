use crate::diff::{Gradients, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Adam moments for every parameter of a store, indexed like the store.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.entries().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction and decoupled weight decay:
/// `p -= lr * m_hat / (sqrt(v_hat) + eps) + lr * weight_decay * p`.
/// Parameters that received no gradient are treated as having a zero gradient.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) -> Result<()> {
    let ids: Vec<_> = store.trainable_ids().collect();
    for &id in &ids {
        if let Some(g) = grads.param(id) {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient {
                    name: store.name(id).to_string(),
                });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (bc1, bc2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
    for id in ids {
        let i = id.index();
        let g = grads.param(id).map(|g| g.data());
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (k, p) in store.value_mut(id).data_mut().iter_mut().enumerate() {
            let g = g.map_or(0.0, |g| g[k]);
            m[k] = beta1 * m[k] + (1.0 - beta1) * g;
            v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
            let (mh, vh) = (m[k] / bc1, v[k] / bc2);
            *p -= lr * mh / (vh.sqrt() + eps) + lr * weight_decay * *p;
        }
    }
    Ok(())
}
