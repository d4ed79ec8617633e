use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Per-epoch learning-rate policy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// `base · gamma^floor(epoch / period)`
    StepDecay { gamma: f64, period: usize },
    /// Cosine annealing from `base` at epoch 0 to `lr_min` at `t_max`.
    Cosine { t_max: usize, lr_min: f64 },
}

impl LrSchedule {
    pub fn lr(&self, base_lr: f64, epoch: usize) -> Result<f64> {
        match *self {
            LrSchedule::Constant => Ok(base_lr),
            LrSchedule::StepDecay { gamma, period } => {
                if period == 0 {
                    return Err(Error::contract("step decay period must be >= 1"));
                }
                Ok(base_lr * gamma.powi((epoch / period) as i32))
            }
            LrSchedule::Cosine { t_max, lr_min } => {
                if epoch > t_max {
                    return Err(Error::contract(format!("cosine schedule epoch {epoch} beyond T = {t_max}")));
                }
                if t_max == 0 {
                    return Ok(base_lr);
                }
                let phase = PI * epoch as f64 / t_max as f64;
                Ok(lr_min + 0.5 * (base_lr - lr_min) * (1.0 + phase.cos()))
            }
        }
    }
}

/// Batchnorm running-stat momentum: `start` halved every `period` epochs,
/// never below `floor`.
pub fn bn_momentum(epoch: usize, start: f64, period: usize, floor: f64) -> f64 {
    let halvings = epoch.checked_div(period).unwrap_or(0);
    (start * 0.5f64.powi(halvings as i32)).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_decay_after_one_period() {
        let s = LrSchedule::StepDecay { gamma: 0.7, period: 20 };
        assert!((s.lr(0.001, 20).unwrap() - 0.0007).abs() < 1e-15);
        assert_eq!(s.lr(0.001, 19).unwrap(), 0.001);
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let s = LrSchedule::Cosine { t_max: 100, lr_min: 0.01 };
        assert!((s.lr(0.1, 0).unwrap() - 0.1).abs() < 1e-15);
        assert!((s.lr(0.1, 100).unwrap() - 0.01).abs() < 1e-15);
        assert!((s.lr(0.1, 50).unwrap() - 0.055).abs() < 1e-15);
        assert!(s.lr(0.1, 101).is_err());
    }

    #[test]
    fn constant_ignores_epoch() {
        for e in [0, 1, 17, 1000] {
            assert_eq!(LrSchedule::Constant.lr(0.001, e).unwrap(), 0.001);
        }
    }

    #[test]
    fn bn_momentum_halves() {
        assert_eq!(bn_momentum(0, 0.5, 20, 0.01), 0.5);
        assert_eq!(bn_momentum(20, 0.5, 20, 0.01), 0.25);
        assert_eq!(bn_momentum(40, 0.5, 20, 0.01), 0.125);
        assert_eq!(bn_momentum(400, 0.5, 20, 0.01), 0.01);
    }
}
