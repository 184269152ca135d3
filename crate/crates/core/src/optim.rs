//! AdamW, the cosine learning-rate schedule and global-norm clipping.

use hiper_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::nn::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// First and second moments per parameter plus the step count.
#[derive(Clone, Debug, Default)]
pub struct AdamWState<T> {
    pub step: u64,
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            moments: Vec::new(),
        }
    }
}

/// One decoupled-decay Adam step: `p ← p − lr·wd·p`, then the bias-corrected
/// adaptive update.
pub fn adamw_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[(ParamId, Tensor<T>)],
    state: &mut AdamWState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    if state.moments.len() < store.len() {
        state.moments.resize(store.len(), None);
    }
    for (id, g) in grads {
        let p = store.value_mut(*id);
        let (m, v) = state.moments[id.index()]
            .get_or_insert_with(|| (vec![T::ZERO; g.numel()], vec![T::ZERO; g.numel()]));
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let g = g.to_f64();
            let mm = cfg.beta1 * m.to_f64() + (1.0 - cfg.beta1) * g;
            let vv = cfg.beta2 * v.to_f64() + (1.0 - cfg.beta2) * g * g;
            *m = T::from_f64(mm);
            *v = T::from_f64(vv);
            let step = lr * (mm / bc1) / ((vv / bc2).sqrt() + cfg.eps);
            *p = T::from_f64(p.to_f64() * decay - step);
        }
    }
}

/// `eta_min + ½(lr₀ − eta_min)(1 + cos(π·min(t, T)/T))`, evaluated as a convex
/// combination so both endpoints are exact.
pub fn cosine_lr(t: f64, t_max: f64, lr0: f64, eta_min: f64) -> f64 {
    let frac = (t.max(0.0) / t_max).min(1.0);
    let w = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
    w * lr0 + (1.0 - w) * eta_min
}

pub fn global_norm<T: Scalar>(grads: &[(ParamId, Tensor<T>)]) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|v| {
            let v = v.to_f64();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients by `max_norm / ‖g‖` when the global L2 norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [(ParamId, Tensor<T>)], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v = T::from_f64(v.to_f64() * s);
            }
        }
    }
    norm
}
