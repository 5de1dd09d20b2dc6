//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Moment estimates aligned with a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamWState {
    pub fn new(ps: &ParamSet) -> Self {
        Self { step: 0, m: ps.zeros_like(), v: ps.zeros_like() }
    }
}

/// One update of every parameter. Gradients are checked for finiteness
/// before anything is written.
pub fn adamw_step(ps: &mut ParamSet, grads: &[Tensor], state: &mut AdamWState, lr: f64, cfg: &AdamWConfig) -> Result<()> {
    if grads.len() != ps.len() || state.m.len() != ps.len() {
        return Err(invalid_input(format!("{} gradients for {} parameters", grads.len(), ps.len())));
    }
    for (id, g) in ps.ids().zip(grads) {
        if g.shape() != ps.get(id).shape() {
            return Err(invalid_input(format!("gradient shape {:?} for `{}`", g.shape(), ps.name(id))));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(ps.name(id).to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in ps.tensors_mut().iter_mut().enumerate() {
        let (m, v, g) = (state.m[i].data_mut(), state.v[i].data_mut(), grads[i].data());
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let update = (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.eps);
            *w -= lr * (update + cfg.weight_decay * *w);
        }
    }
    Ok(())
}
