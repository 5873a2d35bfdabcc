use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ModelConfig;

/// Training hyperparameters plus the model they apply to. Loadable from TOML;
/// model fields live under a `[model]` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    /// Multiplicative decay applied once per epoch, or once per
    /// `decay_interval` steps when that is set.
    pub lr_decay: f64,
    pub decay_interval: Option<usize>,
    /// Fraction of `steps` spent in linear warmup.
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub frames: usize,
    /// Forward/backward worker threads. Results do not depend on this.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            learning_rate: 1e-4,
            lr_decay: 0.9,
            decay_interval: None,
            warmup_ratio: 0.1,
            batch_size: 8,
            steps: 1000,
            seed: 0,
            frames: 8,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.frames == 0 || self.workers == 0 {
            return Err(Error::Config("batch_size, frames and workers must be at least 1".into()));
        }
        if self.decay_interval == Some(0) {
            return Err(Error::Config("decay_interval must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("lr_decay must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("warmup_ratio must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Learning rate at zero-based `step` given the epoch length.
    pub fn lr_at(&self, step: usize, steps_per_epoch: usize) -> f64 {
        let warmup = (self.warmup_ratio * self.steps as f64).ceil() as usize;
        let ramp = if step < warmup {
            (step + 1) as f64 / warmup as f64
        } else {
            1.0
        };
        let period = self.decay_interval.unwrap_or(steps_per_epoch.max(1));
        let decays = step.saturating_sub(warmup) / period;
        self.learning_rate * ramp * self.lr_decay.powi(decays.min(i32::MAX as usize) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_partial_files() {
        let cfg = TrainConfig::from_toml("steps = 5\n[model]\nnum_prompts = 0\n").unwrap();
        assert_eq!(cfg.steps, 5);
        assert_eq!(cfg.model.num_prompts, 0);
        assert_eq!(cfg.model.dim, 32);
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(TrainConfig::from_toml("stepz = 5").is_err());
        assert!(TrainConfig::from_toml("[model.hierarchies]\nholistic = false\nkeyword = false\nattribute = false").is_err());
        assert!(TrainConfig::from_toml("[model.branches]\ntemporal = false\nspatial = false").is_err());
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = TrainConfig {
            steps: 100,
            learning_rate: 1.0,
            ..Default::default()
        };
        assert!((cfg.lr_at(0, 10) - 0.1).abs() < 1e-12);
        assert!((cfg.lr_at(9, 10) - 1.0).abs() < 1e-12);
        assert!((cfg.lr_at(19, 10) - 1.0).abs() < 1e-12);
        assert!((cfg.lr_at(20, 10) - 0.9).abs() < 1e-12);
        assert!((cfg.lr_at(99, 10) - 0.9f64.powi(8)).abs() < 1e-12);
        let stepped = TrainConfig {
            decay_interval: Some(5),
            ..cfg
        };
        assert!((stepped.lr_at(15, 10) - 0.9).abs() < 1e-12);
    }
}
