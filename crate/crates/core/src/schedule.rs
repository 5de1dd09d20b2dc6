//! Linear warmup followed by cosine annealing with warm restarts.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub t0: usize,
    pub t_mult: usize,
    /// Peak multiplier applied at every restart.
    pub gamma: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { base_lr: 1e-4, warmup_epochs: 5, t0: 10, t_mult: 2, gamma: 0.3 }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(invalid_config(format!("base_lr must be finite and nonnegative, got {}", self.base_lr)));
        }
        if self.t0 == 0 || self.t_mult == 0 {
            return Err(invalid_config("T_0 and T_mult must be at least 1"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(invalid_config(format!("scheduler gamma must lie in (0, 1], got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Learning rate used throughout `epoch`.
pub fn lr_at(epoch: usize, s: &ScheduleConfig) -> f64 {
    if epoch < s.warmup_epochs {
        return s.base_lr * (epoch + 1) as f64 / s.warmup_epochs as f64;
    }
    let mut t = epoch - s.warmup_epochs;
    let mut len = s.t0;
    let mut peak = s.base_lr;
    while t >= len {
        t -= len;
        len = len.saturating_mul(s.t_mult);
        peak *= s.gamma;
    }
    (peak * (1.0 + (PI * t as f64 / len as f64).cos()) / 2.0).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_linear() {
        let s = ScheduleConfig::default();
        for e in 0..5 {
            assert!((lr_at(e, &s) - 1e-4 * (e + 1) as f64 / 5.0).abs() < 1e-18);
        }
    }

    #[test]
    fn first_cycle_start_and_middle() {
        let s = ScheduleConfig::default();
        assert_eq!(lr_at(5, &s), 1e-4);
        assert!((lr_at(10, &s) - 0.5e-4).abs() < 1e-18);
    }

    #[test]
    fn restarts_decay_the_peak_and_lengthen() {
        let s = ScheduleConfig::default();
        assert!((lr_at(15, &s) - 0.3e-4).abs() < 1e-18);
        assert!((lr_at(25, &s) - 0.15e-4).abs() < 1e-18);
        assert!((lr_at(35, &s) - 0.09e-4).abs() < 1e-18);
    }

    #[test]
    fn nonincreasing_within_cycles() {
        let s = ScheduleConfig::default();
        for (start, len) in [(5, 10), (15, 20), (35, 40)] {
            for e in start..start + len - 1 {
                assert!(lr_at(e + 1, &s) <= lr_at(e, &s));
                assert!(lr_at(e, &s) >= 0.0);
            }
        }
    }

    #[test]
    fn no_warmup() {
        let s = ScheduleConfig { warmup_epochs: 0, ..ScheduleConfig::default() };
        assert_eq!(lr_at(0, &s), 1e-4);
        assert!(ScheduleConfig { t0: 0, ..s.clone() }.validate().is_err());
        assert!(ScheduleConfig { gamma: 0.0, ..s }.validate().is_err());
    }
}
