//! Learning-rate schedule, Adam and gradient clipping.

use crate::harness::config::OptimConfig;
use crate::numerics::ParamStore;

/// Linear warmup to `peak` at step `warmup`, then inverse square-root decay:
/// `peak · min(step / warmup, sqrt(warmup / step))`. Steps count from 1.
pub fn lr_at(step: u64, peak: f64, warmup: u64) -> f64 {
    let (s, w) = (step.max(1) as f64, warmup.max(1) as f64);
    peak * (s / w).min((w / s).sqrt())
}

/// Scales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(ps: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = ps.grad_norm();
    if norm > max_norm {
        ps.scale_grads(max_norm / norm);
    }
    norm
}

/// Adam with bias correction. Moments are stored per parameter in store
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &OptimConfig, ps: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = ps.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update with learning rate `lr` from the gradients held in `ps`.
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn update(&mut self, ps: &mut ParamStore, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = ps.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let t = ps.get_mut(id);
            let grad = t.grad().map(<[f64]>::to_vec);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                let g = grad.as_ref().map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
