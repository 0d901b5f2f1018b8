//! Dataset files: model-facing records and the evaluation-only truth, one
//! JSONL file per split each.

use std::path::{Path, PathBuf};

use crate::artifact::{read_jsonl, write_jsonl, Header};
use crate::error::{Error, Result};
use crate::synthia::{Dataset, GeneratorConfig, PairedSample, Split, Truth};

pub const TRAIN: &str = "train.jsonl";
pub const TEST: &str = "test.jsonl";
pub const TRAIN_TRUTH: &str = "train.truth.jsonl";
pub const TEST_TRUTH: &str = "test.truth.jsonl";

fn files(split: &str) -> Result<(&'static str, &'static str)> {
    match split {
        "train" => Ok((TRAIN, TRAIN_TRUTH)),
        "test" => Ok((TEST, TEST_TRUTH)),
        other => Err(Error::Data(format!("unknown split `{other}`, expected train or test"))),
    }
}

/// Writes both splits and their truth files under `dir`. Every file carries
/// the generator config and seed in its header.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<Vec<PathBuf>> {
    let header = |kind| Header::new(kind, &data.config, data.config.seed);
    let mut out = Vec::new();
    for (name, split) in [("train", &data.train), ("test", &data.test)] {
        let (records, truth) = files(name)?;
        let p = dir.join(records);
        write_jsonl(&p, &header("dataset")?, &split.samples)?;
        out.push(p);
        let p = dir.join(truth);
        write_jsonl(&p, &header("truth")?, &split.truth)?;
        out.push(p);
    }
    Ok(out)
}

/// Model-facing records of one split, with the generator config they were
/// drawn from (seed restored from the header).
pub fn read_records(dir: &Path, split: &str) -> Result<(GeneratorConfig, Vec<PairedSample>)> {
    let (records, _) = files(split)?;
    let (header, rows) = read_jsonl::<PairedSample>(&dir.join(records))?;
    Ok((generator_config(&header)?, rows))
}

/// Records plus truth; the two files must come from the same generation.
pub fn read_split(dir: &Path, split: &str) -> Result<(GeneratorConfig, Split)> {
    let (records, truth) = files(split)?;
    let (h1, samples) = read_jsonl::<PairedSample>(&dir.join(records))?;
    let (h2, truth) = read_jsonl::<Truth>(&dir.join(truth))?;
    if h1.config_hash != h2.config_hash || samples.len() != truth.len() {
        return Err(Error::Data(format!(
            "{records} and its truth file do not belong to the same dataset"
        )));
    }
    Ok((generator_config(&h1)?, Split { samples, truth }))
}

fn generator_config(header: &Header) -> Result<GeneratorConfig> {
    let mut cfg: GeneratorConfig = serde_json::from_value(header.config.clone())
        .map_err(|e| Error::Data(format!("dataset header: {e}")))?;
    cfg.seed = header.seed;
    Ok(cfg)
}
