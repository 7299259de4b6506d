//! Adam with bias correction and a step-halving learning-rate schedule.

use crate::error::{FdnError, Result};
use crate::model::Gradients;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// The learning rate halves every `halving_interval` steps.
    pub halving_interval: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            base_lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            halving_interval: 50_000,
        }
    }
}

impl AdamConfig {
    pub fn lr_at(&self, t: u64) -> f64 {
        let halvings = (t / self.halving_interval.max(1)).min(2000) as i32;
        self.base_lr * 0.5f64.powi(halvings)
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Completed steps.
    pub t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[usize]) -> Self {
        AdamState {
            config,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn for_params(config: AdamConfig, params: &[&Tensor]) -> Self {
        let shapes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        AdamState::new(config, &shapes)
    }

    /// Learning rate the next step will use.
    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.t)
    }

    /// One update; returns the learning rate used.
    pub fn step(&mut self, mut params: Vec<&mut Tensor>, grads: &Gradients) -> Result<f64> {
        if params.len() != grads.0.len() || params.len() != self.m.len() {
            return Err(FdnError::pre("parameter/gradient/state count mismatch"));
        }
        if !grads.is_finite() {
            return Err(FdnError::NonFinite("gradient"));
        }
        let c = &self.config;
        let lr = c.lr_at(self.t);
        let t = (self.t + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(&grads.0)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if p.len() != g.len() || g.len() != m.len() {
                return Err(FdnError::pre("parameter shape mismatch in optimizer"));
            }
            for (((x, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
            if p.data().iter().any(|x| !x.is_finite()) {
                return Err(FdnError::NonFinite("optimizer update"));
            }
        }
        self.t += 1;
        Ok(lr)
    }
}

/// Rescales `grads` to global norm `max_norm` if it is larger. Returns the
/// norm before clipping and whether clipping happened.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> (f64, bool) {
    let norm = grads.norm();
    if norm > max_norm && max_norm > 0.0 {
        grads.scale(max_norm / norm);
        (norm, true)
    } else {
        (norm, false)
    }
}
