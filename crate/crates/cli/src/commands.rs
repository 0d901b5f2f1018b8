use std::io::{BufRead, BufReader};
use std::path::Path;

use anyhow::{bail, Context, Result};
use latflow_core::artifact::{write_json, write_jsonl, Header};
use latflow_core::checkpoint::Checkpoint;
use latflow_core::config::Config;
use latflow_core::dataset::{read_records, read_split, write_dataset, TEST_TRUTH, TRAIN_TRUTH};
use latflow_core::eval::{evaluate, EvalConfig, EvalReport};
use latflow_core::model::{Decoding, Model};
use latflow_core::synthia::{generate, Generator, GeneratorConfig, Split};
use latflow_core::tensor::Tensor;
use latflow_core::train::{train_to_dir, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Common, Direction, Domain};

/// Config file (or defaults) with the `--seed` override applied.
fn load_config(common: &Common) -> Result<Config> {
    let mut config = match &common.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn load_model(path: &Path) -> Result<(Checkpoint, Model)> {
    let ck = Checkpoint::load(path)?;
    let mut model = ck.restore_model()?;
    model.set_training(false);
    Ok((ck, model))
}

fn same_generator(a: &GeneratorConfig, b: &GeneratorConfig) -> bool {
    GeneratorConfig { seed: 0, ..a.clone() } == GeneratorConfig { seed: 0, ..b.clone() }
}

pub fn gen_data(common: &Common) -> Result<()> {
    let config = load_config(common)?.resolve()?;
    let data = generate(&config.data)?;
    write_dataset(&common.out, &data)
        .with_context(|| format!("writing dataset to {}", common.out.display()))?;
    eprintln!(
        "wrote {} train ({} paired) and {} test records to {}",
        data.train.len(),
        data.train.n_paired(),
        data.test.len(),
        common.out.display()
    );
    Ok(())
}

pub fn train(common: &Common, data: &Path, epochs: Option<usize>, resume: Option<&Path>) -> Result<()> {
    let (gen_cfg, records) = read_records(data, "train")?;
    let mut trainer = match resume {
        Some(path) => {
            if common.config.is_some() || common.seed.is_some() {
                bail!("--resume takes its config and seed from the checkpoint");
            }
            let ck = Checkpoint::load(path)?;
            if !same_generator(&ck.config.data, &gen_cfg) {
                bail!("{} was not generated with the checkpoint's data config", data.display());
            }
            Trainer::from_checkpoint(&ck)?
        }
        None => {
            let mut config = load_config(common)?;
            config.data = gen_cfg;
            Trainer::new(config, &records)?
        }
    };
    if let Some(e) = epochs {
        trainer.config.train.epochs = e;
    }
    let start = std::time::Instant::now();
    train_to_dir(&mut trainer, &records, &common.out, |log| {
        eprintln!(
            "epoch {:>3}  step {:>6}  objective {:>10.4}  total {:>10.4}  [{:.1}s]",
            log.epoch + 1,
            log.last_step,
            log.objective,
            log.total,
            start.elapsed().as_secs_f64()
        );
    })?;
    Ok(())
}

#[derive(Deserialize)]
struct InputRecord {
    x_v: Option<Vec<f64>>,
    x_t: Option<Vec<usize>>,
}

/// JSONL input rows; a leading header line, if any, is skipped.
fn read_inputs(path: &Path) -> Result<Vec<InputRecord>> {
    let file = std::fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || (i == 0 && line.starts_with("{\"header\"")) {
            continue;
        }
        out.push(
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?,
        );
    }
    if out.is_empty() {
        bail!("{} holds no input records", path.display());
    }
    Ok(out)
}

#[derive(Serialize)]
struct SampleSpec<'a> {
    checkpoint_config_hash: &'a str,
    direction: &'a str,
    n: usize,
    decoding: Decoding,
}

#[derive(Serialize)]
struct TSample<'a> {
    input: usize,
    sample: usize,
    x_t: &'a [usize],
}

#[derive(Serialize)]
struct VSample<'a> {
    input: usize,
    sample: usize,
    x_v: &'a [f64],
}

fn input_rng(seed: u64, input: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(input as u64);
    rng
}

pub fn sample(
    common: &Common,
    checkpoint: &Path,
    direction: Direction,
    input: &Path,
    n: usize,
    greedy: bool,
    temperature: Option<f64>,
) -> Result<()> {
    if n == 0 {
        bail!("--n must be positive");
    }
    let (ck, model) = load_model(checkpoint)?;
    let mut decoding = match &common.config {
        Some(path) => Config::load(path)?.eval.decoding,
        None => ck.config.eval.decoding,
    };
    decoding.greedy |= greedy;
    if let Some(t) = temperature {
        if t.is_nan() || t <= 0.0 {
            bail!("--temperature must be positive");
        }
        decoding.temperature = t;
    }
    let seed = common.seed.unwrap_or(ck.config.seed);
    let inputs = read_inputs(input)?;
    let spec = SampleSpec {
        checkpoint_config_hash: ck.config_hash(),
        direction: match direction {
            Direction::TGivenV => "t-given-v",
            Direction::VGivenT => "v-given-t",
        },
        n,
        decoding,
    };
    let header = Header::new("samples", &spec, seed)?;
    match direction {
        Direction::TGivenV => {
            let mut rows = Vec::new();
            let mut all = Vec::new();
            for (i, rec) in inputs.iter().enumerate() {
                let x = rec.x_v.as_ref().with_context(|| format!("input {i} has no x_v"))?;
                let zs = model.shared_v_to_t(&Tensor::row(x))?;
                let seqs = model
                    .sample_t_given_shared(&zs, n, decoding, &mut input_rng(seed, i))?
                    .remove(0);
                all.push(seqs);
            }
            for (i, seqs) in all.iter().enumerate() {
                for (j, s) in seqs.iter().enumerate() {
                    rows.push(TSample { input: i, sample: j, x_t: s });
                }
            }
            write_jsonl(&common.out, &header, &rows)?;
        }
        Direction::VGivenT => {
            let mut all = Vec::new();
            for (i, rec) in inputs.iter().enumerate() {
                let x = rec.x_t.as_ref().with_context(|| format!("input {i} has no x_t"))?;
                let zs = model.shared_t_to_v(std::slice::from_ref(x))?;
                all.push(model.sample_v_given_shared(&zs, n, &mut input_rng(seed, i))?.remove(0));
            }
            let rows: Vec<VSample> = all
                .iter()
                .enumerate()
                .flat_map(|(i, x)| {
                    (0..x.rows()).map(move |j| VSample {
                        input: i,
                        sample: j,
                        x_v: x.row_slice(j),
                    })
                })
                .collect();
            write_jsonl(&common.out, &header, &rows)?;
        }
    }
    eprintln!("wrote {} samples for {} inputs to {}", n * inputs.len(), inputs.len(), common.out.display());
    Ok(())
}

#[derive(Serialize)]
struct ReportFile<'a> {
    header: Header,
    report: &'a EvalReport,
}

/// Test split of `data`, checked against the data config the checkpoint
/// was trained with.
fn test_split(data: &Path, ck: &Checkpoint) -> Result<(GeneratorConfig, Split)> {
    let (gen_cfg, split) = read_split(data, "test")?;
    if !same_generator(&ck.config.data, &gen_cfg) {
        bail!("{} was not generated with the checkpoint's data config", data.display());
    }
    Ok((gen_cfg, split))
}

pub fn eval(common: &Common, checkpoint: &Path, data: &Path, max_items: Option<usize>) -> Result<()> {
    let (ck, model) = load_model(checkpoint)?;
    let mut eval_cfg: EvalConfig = match &common.config {
        Some(path) => Config::load(path)?.eval,
        None => ck.config.eval.clone(),
    };
    if max_items.is_some() {
        eval_cfg.max_items = max_items;
    }
    let seed = common.seed.unwrap_or(ck.config.seed);
    let (gen_cfg, split) = test_split(data, &ck)?;
    let generator = Generator::new(gen_cfg)?;
    let report = evaluate(&model, ck.config_hash(), &split, &generator, &eval_cfg, seed)?;
    let mut echoed = ck.config.clone();
    echoed.eval = eval_cfg;
    let file = ReportFile {
        header: Header::new("eval-report", &echoed, seed)?,
        report: &report,
    };
    write_json(&common.out, &file)?;
    let m = &report.metrics;
    eprintln!(
        "mode coverage t|v {:.3}  v|t {:.3}  uniqueness {:.3}  overlap {:.3}  ivom {:.4}",
        m.mode_coverage.t_given_v,
        m.mode_coverage.v_given_t,
        m.uniqueness.t_given_v,
        m.pairwise_overlap,
        m.ivom.mean_distance
    );
    Ok(())
}

#[derive(Serialize)]
struct LatentRow {
    index: usize,
    z_s: Vec<f64>,
    z_prime: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    class: Option<usize>,
}

pub fn export_latents(
    common: &Common,
    checkpoint: &Path,
    data: &Path,
    split: &str,
    domain: Domain,
) -> Result<()> {
    let (ck, model) = load_model(checkpoint)?;
    let truth = if split == "train" { TRAIN_TRUTH } else { TEST_TRUTH };
    let (samples, classes) = match data.join(truth).exists() {
        true => {
            let (_, s) = read_split(data, split)?;
            let classes = s
                .truth
                .iter()
                .map(|t| Some(if domain == Domain::V { t.class_v } else { t.class_t }))
                .collect();
            (s.samples, classes)
        }
        false => {
            let (_, s) = read_records(data, split)?;
            let n = s.len();
            (s, vec![None; n])
        }
    };
    let part = match domain {
        Domain::V => {
            let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.x_v.clone()).collect();
            model.partition_v(&Tensor::from_rows(&rows)?)?
        }
        Domain::T => {
            let seqs: Vec<Vec<usize>> = samples.iter().map(|s| s.x_t.clone()).collect();
            model.partition_t(&seqs)?
        }
    };
    let rows: Vec<LatentRow> = classes
        .into_iter()
        .enumerate()
        .map(|(i, class)| LatentRow {
            index: i,
            z_s: part.zs.row_slice(i).to_vec(),
            z_prime: part.mu.row_slice(i).to_vec(),
            class,
        })
        .collect();
    let header = Header::new("latents", &ck.config, ck.config.seed)?;
    write_jsonl(&common.out, &header, &rows)?;
    eprintln!("wrote {} latent rows to {}", rows.len(), common.out.display());
    Ok(())
}
