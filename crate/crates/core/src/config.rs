//! Run configuration: one TOML document with a section per subsystem.
//!
//! Every field has a built-in default and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::config_hash;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::{ModelConfig, ObjectiveWeights};
use crate::optim::AdamConfig;
use crate::synthia::GeneratorConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Records used for the data-dependent actnorm init.
    pub init_batch: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            init_batch: 256,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub data: GeneratorConfig,
    pub model: ModelConfig,
    pub objective: ObjectiveWeights,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().replace('\n', " ")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Copies data-derived sizes into the model section and validates the
    /// result.
    pub fn resolve(mut self) -> Result<Self> {
        self.data.seed = self.seed;
        self.model.x_dim = 2;
        self.model.vocab = self.data.vocab;
        self.model.seq_len = self.data.seq_len;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.objective.validate()?;
        self.eval.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        let a = &self.train.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config("train.adam: need lr > 0, betas in [0, 1), eps > 0".into()));
        }
        if matches!(a.clip_norm, Some(c) if c <= 0.0) {
            return Err(Error::Config("train.adam.clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
    }

    #[test]
    fn unknown_key_is_an_error_naming_it() {
        let err = Config::from_toml("[objective]\nlamda_align = 2.0\n").unwrap_err();
        assert!(err.to_string().contains("lamda_align"), "{err}");
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = Config::from_toml("seed = 9\n[train]\nepochs = 3\n[model.bridge]\nblocks = 2\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(c.model.bridge.blocks, 2);
        assert_eq!(c.model.prior_t.blocks, 8);
    }

    #[test]
    fn toml_round_trip() {
        let c = Config::default().resolve().unwrap();
        let back = Config::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn resolve_copies_data_sizes() {
        let mut c = Config::default();
        c.data.vocab = 20;
        c.data.seq_len = 7;
        c.seed = 4;
        let r = c.resolve().unwrap();
        assert_eq!((r.model.vocab, r.model.seq_len, r.data.seed), (20, 7, 4));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(Config::from_toml("[objective]\nkl_t = -1.0\n").unwrap().resolve().is_err());
        assert!(Config::from_toml("[data]\npairing_fraction = 1.5\n").unwrap().resolve().is_err());
        assert!(Config::from_toml("[train]\nbatch_size = 0\n").unwrap().resolve().is_err());
    }
}
