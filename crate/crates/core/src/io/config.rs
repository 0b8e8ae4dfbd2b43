//! TOML run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::DatasetConfig;
use crate::error::{Error, Result};
use crate::interpret::{Cuts, SmoothingConfig, GAUSSIAN_WIDTH};
use crate::model::{ModelConfig, TrainConfig};

/// Settings for the interpretability analyses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterpretConfig {
    pub smoothing: SmoothingConfig,
    pub cuts: Cuts,
    /// Transverse σ of the Gaussian-weighted integrated profile, in pixels.
    pub gaussian_width: f64,
    /// Differentiate raw logits instead of softmax probabilities.
    pub logits: bool,
    /// Use only the first `max_events` events of the split (0 = all).
    pub max_events: usize,
    /// Bins of the signal/background histograms in evaluation reports.
    pub histogram_bins: usize,
}

impl Default for InterpretConfig {
    fn default() -> Self {
        Self {
            smoothing: SmoothingConfig::default(),
            cuts: Cuts::default(),
            gaussian_width: GAUSSIAN_WIDTH,
            logits: false,
            max_events: 0,
            histogram_bins: 20,
        }
    }
}

impl InterpretConfig {
    pub fn validate(&self) -> Result<()> {
        self.smoothing.validate()?;
        if !(self.gaussian_width > 0.0) {
            return Err(Error::Config("interpret.gaussian_width must be positive".into()));
        }
        if self.histogram_bins == 0 {
            return Err(Error::Config("interpret.histogram_bins must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for parameter initialization, shuffling and saliency noise.
    pub seed: u64,
    /// Dataset directory (written by `generate`, read by the others).
    pub dataset: PathBuf,
    /// Directory for checkpoints, logs and analysis outputs.
    pub output: PathBuf,
    pub data: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub interpret: InterpretConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: PathBuf::from("data"),
            output: PathBuf::from("run"),
            data: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            interpret: InterpretConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.interpret.validate()
    }

    /// Fails unless the dataset directory holds a manifest.
    pub fn check_dataset(&self) -> Result<()> {
        let m = self.dataset.join(super::MANIFEST_FILE);
        if !m.is_file() {
            return Err(Error::Config(format!("dataset manifest {} not found", m.display())));
        }
        Ok(())
    }

    /// Hash identifying a training run's architecture and optimizer
    /// settings. The epoch target is left out so a run can be extended.
    pub fn config_hash(&self) -> String {
        config_hash(&self.model, &self.train)
    }
}

pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let train = TrainConfig {
        epochs: 0,
        ..train.clone()
    };
    let text = serde_json::to_string(&(model, &train)).expect("configs serialize");
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml("[train]\nlearnin_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learnin_rate"), "{err}");
        let err = RunConfig::from_toml("sed = 1\n").unwrap_err();
        assert!(err.to_string().contains("sed"), "{err}");
    }

    #[test]
    fn partial_tables_take_defaults() {
        let c = RunConfig::from_toml("seed = 4\n[model.cnn]\nblocks = 1\n").unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.model.cnn.blocks, 1);
        assert_eq!(c.train, TrainConfig::default());
    }

    #[test]
    fn hash_ignores_epochs_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.epochs = 7;
        assert_eq!(a.config_hash(), b.config_hash());
        b.train.learning_rate = 1.0;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash().len(), 64);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml("[train]\nbatch_size = 0\n").is_err());
        assert!(RunConfig::from_toml("[data]\ncosmic_fraction = 0.5\n").is_err());
    }
}
