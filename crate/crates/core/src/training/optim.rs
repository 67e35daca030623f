use ndarray::Array2;

use crate::model::{is_decayed_param, is_stem_param};
use crate::tensor::{Gradients, ParamStore};

/// AdamW with decoupled weight decay and a per-parameter learning rate.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Array2<f32>>,
    v: Vec<Array2<f32>>,
    t: u64,
}

/// Learning rates and decay for one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateRates {
    pub lr: f64,
    pub stem_lr: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros = || params.iter().map(|(_, _, p)| Array2::zeros(p.raw_dim())).collect();
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. Stem parameters use `stem_lr`; weight decay applies to
    /// weight matrices and embeddings only. Parameters without a gradient
    /// are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &Gradients<f32>, rates: UpdateRates) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let name = params.name(id);
            let lr = if is_stem_param(name) { rates.stem_lr } else { rates.lr };
            let wd = if is_decayed_param(name) { rates.weight_decay } else { 0.0 };
            let decay = (1.0 - lr * wd) as f32;
            let step = (lr / bc1) as f32;
            let (b1f, b2f) = (b1 as f32, b2 as f32);
            let inv_bc2 = (1.0 / bc2) as f32;
            let eps = self.eps as f32;
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = params.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1f * *m + (1.0 - b1f) * g;
                *v = b2f * *v + (1.0 - b2f) * g * g;
                *p *= decay;
                *p -= step * *m / ((*v * inv_bc2).sqrt() + eps);
            });
        }
    }
}

/// Multi-step schedule: the base rate, multiplied by `factor` once
/// `step ≥ drop_at`.
pub fn scheduled_lr(base: f64, step: usize, drop_at: usize, factor: f64) -> f64 {
    if step >= drop_at {
        base * factor
    } else {
        base
    }
}

/// Scales gradients down to global norm `max_norm` if they exceed it.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients<f32>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm.is_finite() {
        grads.scale(max_norm / norm);
    }
    norm
}
