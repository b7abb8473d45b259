//! Training and distillation hyper-parameters.

use crate::tinynn::NnError;

/// Local SGD settings. Defaults follow the reference experiment setup:
/// lr 0.001, weight decay 0.001, batch 64, 5 local epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            weight_decay: 0.001,
            batch_size: 64,
            local_epochs: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(NnError::BadConfig(format!("lr {}", self.lr)));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(NnError::BadConfig(format!(
                "weight_decay {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(NnError::BadConfig("batch_size 0".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// Teacher selection and distillation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub temperature: f64,
    pub base_teacher_frac: f64,
    pub max_teacher_frac: f64,
    pub growth_per_round: f64,
    /// Passes over the local shard during the distillation phase.
    pub epochs: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 2.0,
            base_teacher_frac: 0.30,
            max_teacher_frac: 0.50,
            growth_per_round: 0.05,
            epochs: 1,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(NnError::BadConfig(format!(
                "temperature {}",
                self.temperature
            )));
        }
        let (b, m) = (self.base_teacher_frac, self.max_teacher_frac);
        if !(0.0 < b && b <= m && m <= 1.0) {
            return Err(NnError::BadConfig(format!(
                "teacher fractions base {b} max {m}"
            )));
        }
        if self.growth_per_round.is_nan() || self.growth_per_round < 0.0 {
            return Err(NnError::BadConfig(format!(
                "growth_per_round {}",
                self.growth_per_round
            )));
        }
        Ok(())
    }

    /// Teacher fraction for round `t` (1-based): linear growth, capped.
    pub fn teacher_frac(&self, round: usize) -> f64 {
        let steps = round.saturating_sub(1) as f64;
        (self.base_teacher_frac + self.growth_per_round * steps).min(self.max_teacher_frac)
    }

    /// `ceil(frac(t) * candidates)`. A 1e-9 slack absorbs float noise in the
    /// product so that e.g. 0.4 * 5 yields 2, not 3.
    pub fn teacher_count(&self, round: usize, candidates: usize) -> usize {
        let raw = self.teacher_frac(round) * candidates as f64;
        ((raw - 1e-9).ceil().max(0.0) as usize).min(candidates)
    }
}
