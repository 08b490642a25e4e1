use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decay {
    /// Linear from the peak to zero at `total_steps`.
    Linear,
    /// Hold the peak after warmup.
    Constant,
}

/// Piecewise-linear learning rate: `0 -> peak` over `[0, warmup]`, then
/// decay per `decay` until `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub decay: Decay,
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        if step < self.warmup_steps {
            return Ok(self.peak_lr * step as f64 / self.warmup_steps as f64);
        }
        Ok(match self.decay {
            Decay::Constant => self.peak_lr,
            Decay::Linear if self.total_steps == self.warmup_steps => self.peak_lr,
            Decay::Linear => {
                let remaining = (self.total_steps - step) as f64;
                self.peak_lr * remaining / (self.total_steps - self.warmup_steps) as f64
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_schedule() -> LrSchedule {
        LrSchedule {
            peak_lr: 5e-4,
            warmup_steps: 32_000,
            total_steps: 400_000,
            decay: Decay::Linear,
        }
    }

    #[test]
    fn warmup_endpoints() {
        let s = default_schedule();
        assert_eq!(s.at(0).unwrap(), 0.0);
        assert_eq!(s.at(32_000).unwrap(), 5e-4);
        assert!((s.at(16_000).unwrap() - 2.5e-4).abs() < 1e-18);
        assert_eq!(s.at(400_000).unwrap(), 0.0);
        assert!(matches!(s.at(400_001), Err(Error::StepOutOfRange { .. })));
    }

    #[test]
    fn continuous_at_warmup_boundary() {
        let s = default_schedule();
        let left = s.at(31_999).unwrap();
        let right = s.at(32_001).unwrap();
        assert!((left - 5e-4).abs() < 2e-8 && (right - 5e-4).abs() < 2e-8);
        let c = LrSchedule {
            decay: Decay::Constant,
            ..s
        };
        assert_eq!(c.at(300_000).unwrap(), 5e-4);
    }
}
