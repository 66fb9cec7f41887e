use serde::{Deserialize, Serialize};

use super::TrainError;

/// Warmup, then a constant plateau, then cosine decay to `lr_end`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WsdSchedule {
    pub lr_peak: f64,
    pub lr_end: f64,
    pub warmup_steps: u64,
    pub stable_steps: u64,
    pub decay_steps: u64,
}

impl WsdSchedule {
    pub fn constant(lr: f64, steps: u64) -> Self {
        Self { lr_peak: lr, lr_end: lr, warmup_steps: 0, stable_steps: steps, decay_steps: 0 }
    }

    pub fn total_steps(&self) -> u64 {
        self.warmup_steps + self.stable_steps + self.decay_steps
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return Err(TrainError::Config(format!("lr_peak must be positive, got {}", self.lr_peak)));
        }
        if !(self.lr_end >= 0.0 && self.lr_end <= self.lr_peak) {
            return Err(TrainError::Config(format!(
                "lr_end must lie in [0, lr_peak], got {}",
                self.lr_end
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> Result<f64, TrainError> {
        lr_at(self, step)
    }
}

/// Learning rate at a 0-based step.
pub fn lr_at(schedule: &WsdSchedule, step: u64) -> Result<f64, TrainError> {
    let total = schedule.total_steps();
    if step >= total {
        return Err(TrainError::StepOutOfRange { step, total });
    }
    let s = schedule;
    if step < s.warmup_steps {
        return Ok(s.lr_peak * step as f64 / s.warmup_steps as f64);
    }
    if step < s.warmup_steps + s.stable_steps {
        return Ok(s.lr_peak);
    }
    let t = (step - s.warmup_steps - s.stable_steps) as f64;
    let progress = t / s.decay_steps as f64;
    Ok(s.lr_end + 0.5 * (s.lr_peak - s.lr_end) * (1.0 + (std::f64::consts::PI * progress).cos()))
}
