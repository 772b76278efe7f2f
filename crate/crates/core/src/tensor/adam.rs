//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};
use super::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig::with_lr(1e-3)
    }
}

/// First/second moment estimates, one pair per parameter, plus the step
/// counter that drives bias correction.
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, _, t)| Tensor::zeros_like(t)).collect::<Vec<_>>();
        let v = m.clone();
        AdamState { m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One optimizer step. A parameter with no gradient entry is left untouched
/// (its moments are not decayed either, matching lazy sparse updates).
/// A non-finite gradient anywhere aborts before mutating anything.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    for (id, name, _) in store.iter() {
        if let Some(g) = grads.get(id) {
            if !g.all_finite() {
                return Err(Error::PoisonedGradient { name: name.to_string() });
            }
        }
    }

    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);

    for idx in 0..store.len() {
        let id = super::params::ParamId(idx);
        let g = match grads.get(id) {
            Some(g) => g,
            None => continue,
        };
        let m = state.m[idx].data_mut();
        let v = state.v[idx].data_mut();
        let p = store.get_mut(id).data_mut();
        let gd = g.data();
        for k in 0..p.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gd[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gd[k] * gd[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
