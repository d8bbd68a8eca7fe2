//! Activated-expert curriculum and learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KMode {
    Linear,
    Constant,
}

/// Maps a training step to the number of activated experts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KSchedule {
    pub k_min: usize,
    pub k_max: usize,
    pub total_steps: usize,
    pub mode: KMode,
}

impl KSchedule {
    pub fn linear(k_min: usize, k_max: usize, total_steps: usize) -> Result<Self> {
        Self::new(k_min, k_max, total_steps, KMode::Linear)
    }

    pub fn constant(k: usize, total_steps: usize) -> Result<Self> {
        Self::new(k, k, total_steps, KMode::Constant)
    }

    pub fn new(k_min: usize, k_max: usize, total_steps: usize, mode: KMode) -> Result<Self> {
        let s = Self {
            k_min,
            k_max,
            total_steps,
            mode,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_min == 0 || self.k_min > self.k_max {
            return Err(Error::Config(format!(
                "k schedule needs 1 <= k_min <= k_max, got k_min={} k_max={}",
                self.k_min, self.k_max
            )));
        }
        Ok(())
    }

    /// `k_min + floor((k_max - k_min) * step / max(1, T - 1))` in linear mode,
    /// `k_max` in constant mode.
    pub fn k_at(&self, step: usize) -> Result<usize> {
        if step >= self.total_steps {
            return Err(Error::InvalidArgument(format!(
                "step {step} outside schedule of {} steps",
                self.total_steps
            )));
        }
        Ok(match self.mode {
            KMode::Constant => self.k_max,
            KMode::Linear => {
                let span = (self.total_steps - 1).max(1);
                self.k_min + (self.k_max - self.k_min) * step / span
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrDecay {
    Cosine,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr0: f64,
    pub total_steps: usize,
    pub decay: LrDecay,
}

impl LrSchedule {
    /// Learning rate at `step`, reaching 0 at `step == T`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.lr0;
        }
        let frac = step.min(self.total_steps) as f64 / self.total_steps as f64;
        match self.decay {
            LrDecay::Cosine => 0.5 * self.lr0 * (1.0 + (std::f64::consts::PI * frac).cos()),
            LrDecay::Linear => self.lr0 * (1.0 - frac),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_examples() {
        let s = KSchedule::linear(2, 16, 1000).unwrap();
        assert_eq!(s.k_at(0).unwrap(), 2);
        assert_eq!(s.k_at(999).unwrap(), 16);
        assert_eq!(s.k_at(500).unwrap(), 9);
        assert!(s.k_at(1000).is_err());
        let c = KSchedule::constant(2, 10).unwrap();
        assert!((0..10).all(|t| c.k_at(t).unwrap() == 2));
        assert!(KSchedule::linear(0, 4, 10).is_err());
        assert!(KSchedule::linear(5, 4, 10).is_err());
    }

    #[test]
    fn single_step_schedule_starts_at_k_min() {
        let s = KSchedule::linear(2, 8, 1).unwrap();
        assert_eq!(s.k_at(0).unwrap(), 2);
    }

    #[test]
    fn lr_examples() {
        let s = LrSchedule {
            lr0: 2.5e-4,
            total_steps: 1000,
            decay: LrDecay::Cosine,
        };
        assert_eq!(s.lr_at(0), 2.5e-4);
        assert!(s.lr_at(1000).abs() < 1e-20);
        assert!((s.lr_at(500) - 1.25e-4).abs() < 1e-18);
        let l = LrSchedule {
            decay: LrDecay::Linear,
            ..s
        };
        assert_eq!(l.lr_at(0), 2.5e-4);
        assert_eq!(l.lr_at(1000), 0.0);
        assert!((l.lr_at(250) - 1.875e-4).abs() < 1e-18);
    }
}
