//! Run configuration: one TOML file with a section per stage.
//!
//! ```toml
//! [synth]
//! n_patients = 1000
//!
//! [model]
//! attention = 1
//!
//! [train]
//! epochs = 100
//! ```
//!
//! Every key is optional; missing keys take the shipped defaults. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::interpret::TsneConfig;
use crate::model::{ModelConfig, PretrainConfig};
use crate::synth::SynthConfig;
use crate::train::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub tsne: TsneConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Replaces every stage seed with `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.train.seed = seed;
        self.tsne.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.tsne.validate()?;
        if self.pretrain.batch_size == 0 || !(self.pretrain.lr > 0.0 && self.pretrain.lr.is_finite()) {
            return Err(Error::Config("pretrain needs a positive batch size and learning rate".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
        assert_eq!(cfg.model.attention, 1);
        assert_eq!(cfg.train.epochs, 100);
        assert_eq!(cfg.train.k_folds, 4);
        assert_eq!(cfg.tsne.perplexity, 100.0);
    }

    #[test]
    fn partial_sections_override_only_named_keys() {
        let cfg = RunConfig::from_toml("[synth]\nn_patients = 50\n\n[train]\nlr = 0.01\n").unwrap();
        assert_eq!(cfg.synth.n_patients, 50);
        assert_eq!(cfg.synth.k_c, SynthConfig::default().k_c);
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.train.batch_size, 20);
    }

    #[test]
    fn typos_are_rejected() {
        assert!(RunConfig::from_toml("[trian]\nlr = 1\n").is_err());
        assert!(RunConfig::from_toml("[train]\nlearning_rate = 1\n").is_err());
        assert!(RunConfig::from_toml("[train]\nlr = \"fast\"\n").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::default().with_seed(9);
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(cfg.synth.seed, 9);
    }

    #[test]
    fn invalid_values_fail_validation() {
        let cfg = RunConfig::from_toml("[model]\ndropout = 1.0\n").unwrap();
        assert!(cfg.validate().is_err());
        let cfg = RunConfig::from_toml("[pretrain]\nbatch_size = 0\n").unwrap();
        assert!(cfg.validate().is_err());
    }
}
