//! Masked-prediction pretraining: loss, optimizer, schedule and the loop.

mod loss;
mod optim;
mod schedule;
mod trainer;

pub use loss::{masked_ce_loss, masked_positions, LossStats};
pub(crate) use loss::item_ce;
pub use optim::{clip_grad_norm, AdamW};
pub use schedule::{Decay, LrSchedule};
pub use trainer::{
    evaluate, pretrain, train_step, train_step_with_lr, BatchSource, MetricsRecord, PretrainSummary, Running, StepMetrics,
    TrainState,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub peak_lr: f64,
    pub batch_size: usize,
    /// Decoupled AdamW decay, applied to every parameter.
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    /// Global L2 gradient-norm ceiling; 0 disables clipping.
    pub grad_clip_norm: f64,
    pub decay: Decay,
    /// Seeds initialization, batch order, trimming and dropout.
    pub seed: u64,
    /// Checkpoint whenever the step count is a multiple of this; 0 disables.
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_steps: 32_000,
            total_steps: 400_000,
            peak_lr: 5e-4,
            batch_size: 25,
            weight_decay: 0.01,
            betas: [0.9, 0.98],
            eps: 1e-6,
            grad_clip_norm: 1.0,
            decay: Decay::Linear,
            seed: 0,
            checkpoint_every: 10_000,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::config(
                "train.warmup_steps",
                format!("{} exceeds total_steps {}", self.warmup_steps, self.total_steps),
            ));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::config("train.peak_lr", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be >= 0"));
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return Err(Error::config("train.betas", "each beta must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("train.eps", "must be > 0"));
        }
        if !(self.grad_clip_norm >= 0.0) {
            return Err(Error::config("train.grad_clip_norm", "must be >= 0"));
        }
        if self.log_every == 0 {
            return Err(Error::config("train.log_every", "must be positive"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
            decay: self.decay,
        }
    }
}

/// Learning rate at `step` under `cfg`.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> Result<f64> {
    cfg.schedule().at(step)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_points() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg).unwrap(), 0.0);
        assert_eq!(lr_schedule(32_000, &cfg).unwrap(), 5e-4);
        assert_eq!(lr_schedule(16_000, &cfg).unwrap(), 2.5e-4);
        assert!(lr_schedule(400_001, &cfg).is_err());
    }

    #[test]
    fn invariants() {
        let cfg = TrainConfig {
            warmup_steps: 10,
            total_steps: 5,
            ..Default::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("train.warmup_steps"));
        let cfg = TrainConfig {
            peak_lr: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
