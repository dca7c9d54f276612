//! AdamW with decoupled weight decay.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct AdamState {
    step: u64,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One optimizer step over the parameters that have gradients. Parameters
/// absent from `grads` are left untouched (no decay either).
pub fn adam_step(store: &mut ParamStore, grads: &[(ParamId, Tensor)], state: &mut AdamState, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (id, g) in grads {
        let p = store.get_mut(*id);
        let (m, v) = state
            .moments
            .entry(*id)
            .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= cfg.lr * cfg.weight_decay * *pv;
            *pv -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}
