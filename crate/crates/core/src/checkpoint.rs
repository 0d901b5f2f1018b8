//! Versioned JSON checkpoints.
//!
//! Floats are written in shortest round-trip form and parsed exactly, so a
//! save/load cycle reproduces every parameter bit for bit.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::{write_json, Header};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::Adam;
use crate::tensor::Tensor;

pub const FORMAT: &str = "latflow-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub format_version: u32,
    pub header: Header,
    pub config: Config,
    pub step: u64,
    pub epoch: usize,
    pub best_epoch_loss: Option<f64>,
    pub actnorm_initialized: Vec<bool>,
    pub params: Vec<NamedTensor>,
    pub optimizer: Adam,
}

impl Checkpoint {
    pub fn capture(
        config: &Config,
        model: &Model,
        optimizer: &Adam,
        epoch: usize,
        best_epoch_loss: Option<f64>,
    ) -> Result<Self> {
        Ok(Self {
            format: FORMAT.to_string(),
            format_version: FORMAT_VERSION,
            header: Header::new("checkpoint", config, config.seed)?,
            config: config.clone(),
            step: optimizer.step_count(),
            epoch,
            best_epoch_loss,
            actnorm_initialized: model.actnorm_flags(),
            params: model
                .params
                .iter()
                .map(|(_, name, t)| NamedTensor {
                    name: name.to_string(),
                    value: t.clone(),
                })
                .collect(),
            optimizer: optimizer.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write to a sibling temp file first so a crash never leaves a torn
        // checkpoint behind.
        let tmp = path.with_extension("tmp");
        write_json(&tmp, self)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        let mut ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format != FORMAT || ck.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format {} v{}",
                ck.format, ck.format_version
            )));
        }
        ck.config.data.seed = ck.config.seed;
        let hash = ck.config.hash()?;
        if hash != ck.header.config_hash {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: header {} vs contents {hash}",
                ck.header.config_hash
            )));
        }
        Ok(ck)
    }

    pub fn config_hash(&self) -> &str {
        &self.header.config_hash
    }

    /// Rebuilds the model and copies every stored tensor into it by name.
    /// Fixed structure that is not a parameter (the permutations inside the
    /// invertible linear layers) is regenerated from the run seed.
    pub fn restore_model(&self) -> Result<Model> {
        let mut model = Model::new(
            self.config.model.clone(),
            &mut ChaCha8Rng::seed_from_u64(self.config.seed),
        )?;
        if model.params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for nt in &self.params {
            let id = model
                .params
                .id(&nt.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", nt.name)))?;
            model
                .params
                .set(id, nt.value.clone())
                .map_err(|e| Error::Checkpoint(format!("`{}`: {e}", nt.name)))?;
        }
        model.restore_actnorm_flags(&self.actnorm_initialized)?;
        Ok(model)
    }
}
