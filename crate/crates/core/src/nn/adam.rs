//! Adam with bias correction, linear learning-rate annealing and optional
//! decoupled weight decay per parameter group.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::ParamTensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled weight decay, applied as `value -= lr_eff * wd * value`
    /// before the Adam delta. Zero disables it.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0 < self.beta1 && self.beta1 < 1.0 && 0.0 < self.beta2 && self.beta2 < 1.0) {
            return Err(Error::Config("beta1 and beta2 must lie in (0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Optimizer state for one parameter group. The same tensors must be passed
/// to [`Adam::step`] in the same order on every call; moment slots are keyed
/// by position.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    steps: u64,
    moments: Vec<Moments>,
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, steps: 0, moments: Vec::new() })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// One update over the group. The effective learning rate is
    /// `base * (1 - update_index / total_updates)`; gradients are consumed
    /// and cleared.
    pub fn step(
        &mut self,
        params: &mut [&mut ParamTensor],
        update_index: u64,
        total_updates: u64,
    ) -> Result<()> {
        if total_updates == 0 {
            return Err(Error::Config("total_updates must be positive for annealing".into()));
        }
        let anneal = 1.0 - (update_index.min(total_updates) as f64 / total_updates as f64);
        let lr_eff = self.cfg.learning_rate * anneal;

        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| Moments { m: vec![0.0; p.len()], v: vec![0.0; p.len()] })
                .collect();
        }
        if self.moments.len() != params.len() {
            return Err(Error::Contract("parameter group changed between Adam steps".into()));
        }

        self.steps += 1;
        let t = self.steps as i32;
        let bias1 = 1.0 - self.cfg.beta1.powi(t);
        let bias2 = 1.0 - self.cfg.beta2.powi(t);

        for (p, mom) in params.iter_mut().zip(&mut self.moments) {
            if mom.m.len() != p.len() {
                return Err(Error::Shape("parameter size changed between Adam steps".into()));
            }
            if self.cfg.weight_decay > 0.0 && lr_eff > 0.0 {
                let decay = lr_eff * self.cfg.weight_decay;
                for v in p.values_mut() {
                    *v -= decay * *v;
                }
            }
            for k in 0..p.len() {
                let g = p.grad()[k];
                mom.m[k] = self.cfg.beta1 * mom.m[k] + (1.0 - self.cfg.beta1) * g;
                mom.v[k] = self.cfg.beta2 * mom.v[k] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = mom.m[k] / bias1;
                let v_hat = mom.v[k] / bias2;
                p.values_mut()[k] -= lr_eff * m_hat / (v_hat.sqrt() + self.cfg.epsilon);
            }
            debug_assert!(p.all_finite(), "non-finite parameter after Adam step");
            p.clear_grad();
        }
        Ok(())
    }
}

/// Scale gradients of all tensors so their global L2 norm is at most
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_grad_norm(params: &mut [&mut ParamTensor], max_norm: f64) -> f64 {
    let total: f64 = params.iter().map(|p| p.grad_sq_norm()).sum();
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            p.scale_grad(scale);
        }
    }
    norm
}
