//! Run configuration: one flat TOML table with every architecture,
//! diffusion and optimizer key. Missing keys take their defaults and
//! unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Set from the training data, never from the file.
const DERIVED_KEYS: [&str; 1] = ["vocab_size"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(flatten)]
    pub diffusion: DiffusionConfig,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for RunConfig {
    /// Desk-scale architecture with the paper's QM9 optimizer settings.
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(0),
            diffusion: DiffusionConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn table_of(cfg: &RunConfig) -> Result<toml::Table> {
    toml::Table::try_from(cfg).map_err(|e| Error::Config(e.to_string()))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut cfg = RunConfig::default();
        for (key, value) in user {
            cfg.set_value(&key, value)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn set_value(&mut self, key: &str, value: toml::Value) -> Result<()> {
        let mut table = table_of(self)?;
        if DERIVED_KEYS.contains(&key) || !table.contains_key(key) {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        table.insert(key.to_string(), value);
        *self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {}", e.message())))?;
        Ok(())
    }

    /// Overrides one key from its textual value, e.g. `("lr", "1e-3")`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parsed = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        self.set_value(key, parsed)
    }

    pub fn to_toml(&self) -> Result<String> {
        let mut table = table_of(self)?;
        for k in DERIVED_KEYS {
            table.remove(k);
        }
        toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))
    }

    /// The model configuration for a vocabulary of `vocab_size` tokens.
    pub fn model_for(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_for(3).validate()?;
        self.diffusion.validate()?;
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.lr, 4e-4);
        assert_eq!((cfg.train.beta1, cfg.train.beta2), (0.9, 0.95));
        assert_eq!(cfg.train.weight_decay, 1e-5);
        assert_eq!(cfg.train.ema_decay, 0.999);
        assert_eq!(cfg.train.packs_per_batch, 180);
        assert_eq!((cfg.model.n_layers, cfg.model.width, cfg.model.diff_width), (4, 128, 256));
        cfg.validate().unwrap();
    }

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::default();
        cfg.train.lr = 1.234e-3;
        cfg.diffusion.sigma_data = 2.5;
        cfg.model.width = 64;
        let text = cfg.to_toml().unwrap();
        assert!(!text.contains("vocab_size"));
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn overrides_and_errors() {
        let cfg = RunConfig::parse("lr = 0.001\nsteps = 7\nsigma_data = 2").unwrap();
        assert_eq!((cfg.train.lr, cfg.train.steps, cfg.diffusion.sigma_data), (1e-3, 7, 2.0));
        assert!(matches!(RunConfig::parse("learning_rate = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("vocab_size = 9"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("steps = \"many\""), Err(Error::Config(_))));
        assert!(RunConfig::parse("lr = ").is_err());
        let mut cfg = RunConfig::default();
        cfg.set("augment", "false").unwrap();
        cfg.set("n_diff", "30").unwrap();
        assert!(!cfg.train.augment);
        assert_eq!(cfg.diffusion.n_diff, 30);
        assert!(cfg.set("width", "wide").is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let cfg = RunConfig::parse("n_layers = 3").unwrap();
        assert!(cfg.validate().is_err());
        let cfg = RunConfig::parse("sigma_min = 100.0").unwrap();
        assert!(cfg.validate().is_err());
    }
}
