//! Adam with an inverse-square-root warmup schedule and global-norm clipping.

use mvsr_tensor::Real;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::ParamStore;

/// `peak_lr * min(step / warmup, sqrt(warmup / step))` for `step >= 1`.
pub fn lr_at(step: u64, warmup_steps: u64, peak_lr: f64) -> f64 {
    assert!(step >= 1, "learning-rate steps start at 1");
    assert!(warmup_steps >= 1, "warmup_steps must be at least 1");
    let (s, w) = (step as f64, warmup_steps as f64);
    peak_lr * (s / w).min((w / s).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.98, eps: 1e-8 }
    }
}

/// First and second moment estimates, laid out like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Adam { m: params.zeros_like(), v: params.zeros_like() }
    }

    /// One bias-corrected update; `t` is the 1-based step number.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>, lr: f64, t: u64, cfg: &AdamConfig) -> Result<()> {
        params.check_same_layout(grads)?;
        params.check_same_layout(&self.m)?;
        let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        let step_size = T::from_f64(lr / bc1);
        let bc2_sqrt = T::from_f64(bc2.sqrt());
        let eps = T::from_f64(cfg.eps);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("layout checked").data();
            let m = self.m.get_mut(name).expect("layout checked").data_mut();
            let v = self.v.get_mut(name).expect("layout checked").data_mut();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + c1 * gi;
                *vi = b2 * *vi + c2 * gi * gi;
                *w -= step_size * *mi / (vi.sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

/// L2 norm over every element of every tensor.
pub fn global_norm<T: Real>(grads: &ParamStore<T>) -> f64 {
    grads.iter().flat_map(|(_, t)| t.data().iter()).map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping. `max_norm <= 0` disables clipping.
pub fn clip_global_norm<T: Real>(grads: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = T::from_f64(max_norm / norm);
        for (_, t) in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
