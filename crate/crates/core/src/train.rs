//! Minibatch training loop, loss logs and checkpointing.
//!
//! All randomness is derived from the run seed: stream 0 initializes the
//! model, stream `e + 1` drives epoch `e` (shuffle order and posterior
//! noise). A resumed run therefore replays exactly the trajectory of an
//! uninterrupted one.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::{Header, JsonlWriter};
use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::{Batch, Model, Noise, Terms};
use crate::optim::Adam;
use crate::synthia::PairedSample;
use crate::tensor::Tensor;

pub const STEP_LOG: &str = "steps.jsonl";
pub const EPOCH_LOG: &str = "epochs.jsonl";
pub const LAST_CHECKPOINT: &str = "checkpoint.json";
pub const BEST_CHECKPOINT: &str = "best.json";
pub const FINAL_CHECKPOINT: &str = "final.json";

/// One optimizer step. `weighted` sums to `total`, the annealed loss that
/// was differentiated; `objective` is the same batch under the configured
/// (un-annealed) weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub rows: usize,
    pub paired: usize,
    pub raw: Terms,
    pub weighted: Terms,
    pub total: f64,
    pub objective: f64,
    pub grad_norm: f64,
}

/// Record-weighted means over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub last_step: u64,
    pub raw: Terms,
    pub weighted: Terms,
    pub total: f64,
    pub objective: f64,
}

pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Fresh model for `config`, before any data-dependent init.
pub fn untrained_model(config: &Config) -> Result<Model> {
    Model::new(config.model.clone(), &mut init_rng(config.seed))
}

pub struct Trainer {
    pub config: Config,
    pub model: Model,
    pub optimizer: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub best_objective: Option<f64>,
}

impl Trainer {
    /// Builds the model and runs the actnorm init on the first
    /// `train.init_batch` records.
    pub fn new(config: Config, data: &[PairedSample]) -> Result<Self> {
        let config = config.resolve()?;
        if data.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut rng = init_rng(config.seed);
        let mut model = Model::new(config.model.clone(), &mut rng)?;
        let n = config.train.init_batch.clamp(1, data.len());
        let seqs: Vec<Vec<usize>> = data[..n].iter().map(|s| s.x_t.clone()).collect();
        let eps = Tensor::randn(n, config.model.t_prime_dim, &mut rng);
        model.init_actnorm(&seqs, &eps)?;
        model.set_training(true);
        let optimizer = Adam::new(config.train.adam, &model.params);
        Ok(Self {
            config,
            model,
            optimizer,
            epoch: 0,
            best_objective: None,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut model = ck.restore_model()?;
        model.set_training(true);
        if ck.optimizer.moments().0.len() != model.params.len() {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        Ok(Self {
            config: ck.config.clone(),
            model,
            optimizer: ck.optimizer.clone(),
            epoch: ck.epoch,
            best_objective: ck.best_epoch_loss,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::capture(
            &self.config,
            &self.model,
            &self.optimizer,
            self.epoch,
            self.best_objective,
        )
    }

    pub fn step_count(&self) -> u64 {
        self.optimizer.step_count()
    }

    /// One gradient step on `batch`.
    pub fn step(&mut self, batch: &Batch, noise: &Noise) -> Result<StepLog> {
        let step = self.optimizer.step_count();
        let weights = self.config.objective.at_step(step);
        let (report, grads) = {
            let g = Graph::new();
            let (loss, report) = self
                .model
                .objective(&g, batch, noise, &weights)
                .map_err(|e| match e {
                    Error::NonFiniteFlow { .. } => Error::NonFiniteLoss { step },
                    e => e,
                })?;
            if !report.total.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            g.backward(loss)?;
            (report, g.gradients(&self.model.params))
        };
        let grad_norm = self.optimizer.step(&mut self.model.params, &grads)?;
        let full = self.config.objective.as_terms().values();
        let objective = report
            .raw
            .values()
            .iter()
            .zip(full)
            .map(|(r, w)| r * w)
            .sum();
        Ok(StepLog {
            step: step + 1,
            epoch: self.epoch,
            rows: report.rows,
            paired: report.paired,
            raw: report.raw,
            weighted: report.weighted,
            total: report.total,
            objective,
            grad_norm,
        })
    }

    /// One pass over `data` in a seed-determined order.
    pub fn run_epoch(
        &mut self,
        data: &[PairedSample],
        mut on_step: impl FnMut(&StepLog) -> Result<()>,
    ) -> Result<EpochLog> {
        if data.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut rng = epoch_rng(self.config.seed, self.epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let bs = self.config.train.batch_size;
        let mut raw = [0.0; 6];
        let mut weighted = [0.0; 6];
        let (mut total, mut objective, mut rows, mut steps) = (0.0, 0.0, 0usize, 0usize);
        for chunk in order.chunks(bs) {
            let samples: Vec<&PairedSample> = chunk.iter().map(|&i| &data[i]).collect();
            let batch = Batch::new(&samples)?;
            let noise = Noise::draw(&self.model, batch.len(), &mut rng);
            let log = self.step(&batch, &noise)?;
            on_step(&log)?;
            let w = log.rows as f64;
            for i in 0..6 {
                raw[i] += w * log.raw.values()[i];
                weighted[i] += w * log.weighted.values()[i];
            }
            total += w * log.total;
            objective += w * log.objective;
            rows += log.rows;
            steps += 1;
        }
        let n = rows as f64;
        let log = EpochLog {
            epoch: self.epoch,
            steps,
            last_step: self.optimizer.step_count(),
            raw: Terms::from_values(raw.map(|v| v / n)),
            weighted: Terms::from_values(weighted.map(|v| v / n)),
            total: total / n,
            objective: objective / n,
        };
        self.epoch += 1;
        Ok(log)
    }
}

/// Files written by [`train_to_dir`].
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
        }
    }

    pub fn steps(&self) -> PathBuf {
        self.dir.join(STEP_LOG)
    }

    pub fn epochs(&self) -> PathBuf {
        self.dir.join(EPOCH_LOG)
    }

    pub fn last(&self) -> PathBuf {
        self.dir.join(LAST_CHECKPOINT)
    }

    pub fn best(&self) -> PathBuf {
        self.dir.join(BEST_CHECKPOINT)
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join(FINAL_CHECKPOINT)
    }
}

/// Trains until `config.train.epochs` epochs are complete, logging every
/// step and epoch under `dir`.
///
/// The rolling checkpoint is rewritten after each epoch; on a non-finite
/// loss the run stops with an error and that file still holds the last
/// good state. A trainer restored from a checkpoint appends to the
/// existing logs.
pub fn train_to_dir(
    trainer: &mut Trainer,
    data: &[PairedSample],
    dir: &Path,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    let paths = RunPaths::new(dir);
    std::fs::create_dir_all(dir)?;
    let header = Header::new("train-log", &trainer.config, trainer.config.seed)?;
    let resuming = trainer.epoch > 0 && paths.steps().exists() && paths.epochs().exists();
    let (mut steps, mut epochs) = if resuming {
        (JsonlWriter::append(&paths.steps())?, JsonlWriter::append(&paths.epochs())?)
    } else {
        (
            JsonlWriter::create(&paths.steps(), &header)?,
            JsonlWriter::create(&paths.epochs(), &header)?,
        )
    };
    if trainer.epoch == 0 {
        trainer.checkpoint()?.save(&paths.last())?;
    }
    let mut logs = Vec::new();
    while trainer.epoch < trainer.config.train.epochs {
        let log = trainer.run_epoch(data, |s| steps.write(s));
        steps.flush()?;
        let log = log?;
        epochs.write(&log)?;
        epochs.flush()?;
        if trainer.best_objective.is_none_or(|b| log.objective < b) {
            trainer.best_objective = Some(log.objective);
            trainer.checkpoint()?.save(&paths.best())?;
        }
        trainer.checkpoint()?.save(&paths.last())?;
        on_epoch(&log);
        logs.push(log);
    }
    trainer.checkpoint()?.save(&paths.final_checkpoint())?;
    Ok(logs)
}
