use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ScheduleMode {
    /// Half-cosine from the base rate down to zero at `total_steps`.
    Cosine,
    /// Multiply by `factor` at every milestone passed.
    StepDecay { milestones: Vec<u64>, factor: f64 },
}

/// Linear warmup followed by cosine or step decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub mode: ScheduleMode,
}

impl LrSchedule {
    pub fn cosine(base: f64, warmup_steps: u64, total_steps: u64) -> Self {
        Self {
            base,
            warmup_steps,
            total_steps,
            mode: ScheduleMode::Cosine,
        }
    }

    pub fn step_decay(base: f64, warmup_steps: u64, milestones: Vec<u64>, factor: f64) -> Self {
        let total_steps = milestones.last().copied().unwrap_or(warmup_steps);
        Self {
            base,
            warmup_steps,
            total_steps,
            mode: ScheduleMode::StepDecay { milestones, factor },
        }
    }

    pub fn constant(base: f64) -> Self {
        Self::step_decay(base, 0, Vec::new(), 1.0)
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base * step as f64 / self.warmup_steps as f64;
        }
        match &self.mode {
            ScheduleMode::Cosine => {
                let span = self.total_steps.saturating_sub(self.warmup_steps);
                if span == 0 {
                    return self.base;
                }
                let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
                (0.5 * self.base * (1.0 + (PI * progress).cos())).max(0.0)
            }
            ScheduleMode::StepDecay { milestones, factor } => {
                let passed = milestones.iter().filter(|&&m| step >= m).count();
                self.base * factor.powi(passed as i32)
            }
        }
    }
}
