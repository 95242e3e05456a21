//! Learning-rate schedule: linear warmup from zero over the first fraction
//! of steps, then linear decay back to zero.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub total_steps: usize,
    pub warmup_fraction: f64,
}

impl Schedule {
    pub fn new(total_steps: usize, warmup_fraction: f64) -> Result<Self> {
        if total_steps == 0 {
            return Err(TrainError::Config("schedule needs at least one step".into()));
        }
        if !(0.0..1.0).contains(&warmup_fraction) {
            return Err(TrainError::Config(format!(
                "warmup fraction {warmup_fraction} outside [0,1)"
            )));
        }
        Ok(Schedule { total_steps, warmup_fraction })
    }

    pub fn warmup_steps(&self) -> usize {
        (self.total_steps as f64 * self.warmup_fraction).round() as usize
    }
}

/// Schedule multiplier in [0, 1]: 0 at step 0, 1 at the end of warmup, 0
/// at `total_steps`, linear in between.
pub fn schedule_factor(step: usize, schedule: &Schedule) -> f64 {
    let total = schedule.total_steps;
    let warm = schedule.warmup_steps();
    let step = step.min(total);
    if step <= warm {
        if warm == 0 {
            1.0
        } else {
            step as f64 / warm as f64
        }
    } else {
        (total - step) as f64 / (total - warm) as f64
    }
}

/// Piecewise-linear rate: 0 at step 0, `peak` at the end of warmup, 0 at
/// `total_steps`. Always `peak * schedule_factor(step)` with one rounding,
/// so per-group rates at the same step stay in exact proportion.
pub fn lr_at(step: usize, schedule: &Schedule, peak: f64) -> f64 {
    peak * schedule_factor(step, schedule)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_peak() {
        let s = Schedule::new(7400, 0.10).unwrap();
        assert_eq!(s.warmup_steps(), 740);
        assert_eq!(lr_at(0, &s, 3e-4), 0.0);
        assert_eq!(lr_at(740, &s, 3e-4), 3e-4);
        assert_eq!(lr_at(7400, &s, 3e-4), 0.0);
    }

    #[test]
    fn decay_is_linear_interpolation() {
        let s = Schedule::new(7400, 0.10).unwrap();
        let peak = 5e-4;
        let want = peak * (7400.0 - 4070.0) / (7400.0 - 740.0);
        assert!((lr_at(4070, &s, peak) - want).abs() < 1e-18);
    }

    #[test]
    fn warmup_is_linear_from_zero() {
        let s = Schedule::new(1000, 0.10).unwrap();
        let peak = 1.0;
        assert!((lr_at(50, &s, peak) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rejects_degenerate_configs() {
        assert!(Schedule::new(0, 0.1).is_err());
        assert!(Schedule::new(10, 1.0).is_err());
    }
}
