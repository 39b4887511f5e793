//! Adaptive-moment optimizer with decoupled weight decay and global-norm clipping.

use ndarray::Zip;

use crate::nn::{Param, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, (beta1, beta2): (f64, f64), weight_decay: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8, weight_decay }
    }
}

/// One update; `step` is 1-based and drives bias correction.
pub fn adam_step<T: Real>(params: &mut [(String, &mut Param<T>)], step: u64, cfg: &AdamConfig) {
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let one = T::one();
    let c1 = T::lit(1.0 - cfg.beta1.powf(step as f64));
    let c2 = T::lit(1.0 - cfg.beta2.powf(step as f64));
    let lr = T::lit(cfg.lr);
    let eps = T::lit(cfg.eps);
    let decay = one - T::lit(cfg.lr * cfg.weight_decay);
    for (_, p) in params.iter_mut() {
        let Param { value, grad, m, v } = &mut **p;
        Zip::from(value).and(&*grad).and(m).and(v).for_each(|w, &g, m, v| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let update = (*m / c1) / ((*v / c2).sqrt() + eps);
            *w = *w * decay - lr * update;
        });
    }
}

pub fn global_grad_norm<T: Real>(params: &[(String, &mut Param<T>)]) -> f64 {
    params
        .iter()
        .map(|(_, p)| p.grad.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
/// Returns the pre-clip norm and whether clipping was applied.
pub fn clip_grad_norm<T: Real>(params: &mut [(String, &mut Param<T>)], max_norm: f64) -> (f64, bool) {
    let norm = global_grad_norm(params);
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / norm);
        for (_, p) in params.iter_mut() {
            p.grad.mapv_inplace(|g| g * s);
        }
        (norm, true)
    } else {
        (norm, false)
    }
}
