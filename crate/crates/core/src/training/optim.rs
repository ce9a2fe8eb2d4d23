//! AdamW with decoupled weight decay, global-norm clipping and a warmup +
//! cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::TrainingError;
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, clip_norm: Some(5.0) }
    }
}

/// Moment accumulators for every trainable tensor of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub skipped: u64,
    pub m: Vec<Option<Tensor>>,
    pub v: Vec<Option<Tensor>>,
}

/// What one call to [`OptimizerState::step`] did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub applied: bool,
    pub grad_norm: f64,
    pub clipped: bool,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let m: Vec<Option<Tensor>> = store
            .entries()
            .iter()
            .map(|e| e.trainable.then(|| Tensor::zeros(e.tensor.shape().to_vec())))
            .collect();
        Self { config, step: 0, skipped: 0, v: m.clone(), m }
    }

    /// One AdamW update at learning rate `lr`. Gradients for parameters not
    /// listed are treated as zero. A non-finite gradient skips the update
    /// entirely and bumps the skip counter.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[(ParamId, Tensor)],
        lr: f64,
    ) -> Result<StepReport, TrainingError> {
        let norm_sq: f64 = grads.iter().flat_map(|(_, g)| g.data()).map(|x| x * x).sum();
        let grad_norm = norm_sq.sqrt();
        if !grad_norm.is_finite() {
            self.skipped += 1;
            log::warn!("non-finite gradient at step {}; update skipped", self.step);
            return Ok(StepReport { applied: false, grad_norm, clipped: false });
        }
        let scale = match self.config.clip_norm {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        let mut full: Vec<Option<&Tensor>> = vec![None; store.len()];
        for (id, g) in grads {
            if self.m.get(id.0).map_or(true, Option::is_none) {
                return Err(TrainingError::Optimizer(format!("gradient for untracked parameter {}", id.0)));
            }
            full[id.0] = Some(g);
        }
        self.step += 1;
        let c = &self.config;
        let (bc1, bc2) = (1.0 - c.beta1.powi(self.step as i32), 1.0 - c.beta2.powi(self.step as i32));
        for i in 0..store.len() {
            let (Some(m), Some(v)) = (self.m[i].as_mut(), self.v[i].as_mut()) else {
                continue;
            };
            let id = ParamId(i);
            let mut p = store.get(id).data().to_vec();
            let mut md = m.data().to_vec();
            let mut vd = v.data().to_vec();
            for j in 0..p.len() {
                let g = full[i].map_or(0.0, |t| t.data()[j] * scale);
                md[j] = c.beta1 * md[j] + (1.0 - c.beta1) * g;
                vd[j] = c.beta2 * vd[j] + (1.0 - c.beta2) * g * g;
                let update = (md[j] / bc1) / ((vd[j] / bc2).sqrt() + c.eps);
                p[j] -= lr * (update + c.weight_decay * p[j]);
            }
            let shape = m.shape().to_vec();
            *m = Tensor::new(shape.clone(), md)?;
            *v = Tensor::new(shape.clone(), vd)?;
            store.set(id, Tensor::new(shape, p)?);
        }
        Ok(StepReport { applied: true, grad_norm, clipped: scale < 1.0 })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub base_lr: f64,
    pub floor_lr: f64,
    pub steps_per_epoch: usize,
}

impl Schedule {
    pub fn validate(&self) -> Result<(), TrainingError> {
        if self.warmup_epochs > self.total_epochs || self.steps_per_epoch == 0 || self.total_epochs == 0 {
            return Err(TrainingError::Config(format!("invalid schedule {self:?}")));
        }
        if !(self.base_lr >= 0.0 && self.floor_lr >= 0.0 && self.base_lr.is_finite() && self.floor_lr <= self.base_lr) {
            return Err(TrainingError::Config(format!("invalid learning rates {self:?}")));
        }
        Ok(())
    }

    /// Linear ramp from 0 to `base_lr` over the warmup epochs, then cosine
    /// decay to `floor_lr` at the end of training.
    pub fn lr_at(&self, epoch: usize, step_in_epoch: usize) -> Result<f64, TrainingError> {
        if epoch >= self.total_epochs || step_in_epoch >= self.steps_per_epoch {
            return Err(TrainingError::Config(format!(
                "epoch {epoch} step {step_in_epoch} outside {} × {}",
                self.total_epochs, self.steps_per_epoch
            )));
        }
        let pos = epoch as f64 + step_in_epoch as f64 / self.steps_per_epoch as f64;
        let warm = self.warmup_epochs as f64;
        if pos < warm {
            return Ok(self.base_lr * pos / warm);
        }
        let span = (self.total_epochs - self.warmup_epochs) as f64;
        let progress = if span > 0.0 { (pos - warm) / span } else { 0.0 };
        Ok(self.floor_lr + 0.5 * (self.base_lr - self.floor_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}
