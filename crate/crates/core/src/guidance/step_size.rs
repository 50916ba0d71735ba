use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::NoiseSchedule;

/// Cap on the loss-normalized multiplier, in units of the base `ρ`.
pub const LOSS_NORMALIZED_CAP: f64 = 1e3;

const LOSS_NORMALIZED_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StepSizeMode {
    #[default]
    Constant,
    /// `ρ/(√L + 1e−8)`, capped at `10³·ρ`.
    LossNormalized,
    /// `ρ·t/T`.
    LinearDecay,
}

/// Per-step guidance weights `ρ_t` (for DPS) and `c_t` (for the clean-estimate rules).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSizeSchedule {
    #[serde(default)]
    pub mode: StepSizeMode,
    pub rho: f64,
    /// Convert with `c_t = ρ_t/√(ᾱ_{t−1}ᾱ_t)` so clean-estimate rules take
    /// steps comparable to DPS.
    #[serde(default)]
    pub match_dps: bool,
}

impl StepSizeSchedule {
    pub fn constant(rho: f64) -> Self {
        Self { mode: StepSizeMode::Constant, rho, match_dps: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rho > 0.0 && self.rho.is_finite() {
            Ok(())
        } else {
            Err(Error::config("step_size.rho", format!("must be positive, got {}", self.rho)))
        }
    }

    /// Returns `(ρ_t, c_t)` for step `t` given the current loss at `x_{0|t}`.
    pub fn resolve(&self, schedule: &NoiseSchedule, t: usize, current_loss: f64) -> Result<(f64, f64)> {
        self.validate()?;
        if t == 0 || t > schedule.steps() {
            return Err(Error::invalid(format!("step {t} outside 1..={}", schedule.steps())));
        }
        let rho_t = match self.mode {
            StepSizeMode::Constant => self.rho,
            StepSizeMode::LossNormalized => {
                if !(current_loss >= 0.0) {
                    return Err(Error::invalid(format!("loss-normalized step needs a nonnegative loss, got {current_loss}")));
                }
                (self.rho / (current_loss.sqrt() + LOSS_NORMALIZED_FLOOR)).min(LOSS_NORMALIZED_CAP * self.rho)
            }
            StepSizeMode::LinearDecay => self.rho * t as f64 / schedule.steps() as f64,
        };
        let c_t = if self.match_dps {
            dps_matched_weight(rho_t, schedule.alpha_bar(t - 1), schedule.alpha_bar(t))
        } else {
            rho_t
        };
        Ok((rho_t, c_t))
    }
}

/// `c_t = ρ_t/√(ᾱ_{t−1}ᾱ_t)`, the clean-estimate weight that mirrors a DPS step of size `ρ_t`.
pub fn dps_matched_weight(rho_t: f64, alpha_bar_prev: f64, alpha_bar_t: f64) -> f64 {
    rho_t / (alpha_bar_prev * alpha_bar_t).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::from_alpha_bar(vec![1.0, 0.8, 0.5], 0.0).unwrap()
    }

    #[test]
    fn constant_mode() {
        let s = StepSizeSchedule::constant(0.3);
        for t in 1..=2 {
            assert_eq!(s.resolve(&sched(), t, 5.0).unwrap(), (0.3, 0.3));
        }
    }

    #[test]
    fn loss_normalized_mode_and_cap() {
        let s = StepSizeSchedule { mode: StepSizeMode::LossNormalized, rho: 0.3, match_dps: false };
        let (_, c) = s.resolve(&sched(), 1, 4.0).unwrap();
        assert!((c - 0.3 / (2.0 + 1e-8)).abs() < 1e-15);
        let (_, c) = s.resolve(&sched(), 1, 0.0).unwrap();
        assert_eq!(c, 300.0);
        assert!(s.resolve(&sched(), 1, -1.0).is_err());
    }

    #[test]
    fn linear_decay_stays_positive() {
        let s = StepSizeSchedule { mode: StepSizeMode::LinearDecay, rho: 1.0, match_dps: false };
        assert_eq!(s.resolve(&sched(), 1, 0.0).unwrap().1, 0.5);
        assert_eq!(s.resolve(&sched(), 2, 0.0).unwrap().1, 1.0);
    }

    #[test]
    fn dps_conversion() {
        let c = dps_matched_weight(0.3, 0.8, 0.5);
        assert!((c - 0.474_341_649_025_257).abs() < 1e-12);
        let s = StepSizeSchedule { match_dps: true, ..StepSizeSchedule::constant(0.3) };
        assert_eq!(s.resolve(&sched(), 2, 0.0).unwrap(), (0.3, c));
    }
}
