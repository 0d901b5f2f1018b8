use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    best_of_k, distinct_ngrams, euclidean, hit_fraction, ivom, mean_pairwise_distance,
    normalized_hamming, pairwise_overlap, t_modes_hit, uniqueness_t, uniqueness_v, v_modes_hit,
    EvalConfig,
};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::synthia::{Generator, Split};
use crate::tensor::Tensor;

pub const METRIC_KEYS: [&str; 8] = [
    "oracle_best_of_k",
    "uniqueness",
    "pairwise_overlap",
    "distinct_1",
    "distinct_2",
    "mode_coverage",
    "ivom",
    "mean_pairwise_v_distance",
];

/// A metric measured in both sampling directions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Directional {
    pub t_given_v: f64,
    pub v_given_t: f64,
}

/// Mean best-of-k distance for one `k`, with the condition-blind baseline
/// (every candidate decoded from the shared code of a random test record).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub k: usize,
    pub conditional: Directional,
    pub baseline: Directional,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IvomSummary {
    pub mean_distance: f64,
    pub diverged: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub oracle_best_of_k: Vec<OracleRow>,
    pub uniqueness: Directional,
    pub pairwise_overlap: f64,
    pub distinct_1: f64,
    pub distinct_2: f64,
    pub mode_coverage: Directional,
    pub ivom: IvomSummary,
    pub mean_pairwise_v_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub items: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub seed: u64,
    pub items: usize,
    pub metrics: Metrics,
    /// Mean squared gap between bridged V shared codes and T shared codes.
    pub alignment_mse: f64,
    pub per_class: Vec<ClassReport>,
}

/// Per-record measurements before averaging.
struct Item {
    class: usize,
    best_t: Vec<f64>,
    best_v: Vec<f64>,
    base_t: Vec<f64>,
    base_v: Vec<f64>,
    uniq_t: f64,
    uniq_v: f64,
    overlap: f64,
    distinct_1: f64,
    distinct_2: f64,
    cover_t: f64,
    cover_v: f64,
    spread_v: f64,
    ivom: f64,
}

// Independent streams per (task, record) keep every record's samples
// fixed regardless of evaluation order or thread count.
const T_LATENT: u64 = 1;
const T_TOKENS: u64 = 2;
const V_LATENT: u64 = 3;
const BASE_PICK: u64 = 4;
const BASE_T_LATENT: u64 = 5;
const BASE_T_TOKENS: u64 = 6;
const BASE_V_LATENT: u64 = 7;
const IVOM_STARTS: u64 = 8;

fn task_rng(seed: u64, task: u64, item: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((task << 40) | item as u64);
    rng
}

struct Shared<'a> {
    model: &'a Model,
    generator: &'a Generator,
    config: &'a EvalConfig,
    split: &'a Split,
    seed: u64,
    zs_t: Tensor,
    zs_v: Tensor,
    ivom: Vec<f64>,
}

fn measure(s: &Shared, i: usize) -> Result<Item> {
    let cfg = s.config;
    let n = cfg.samples_needed();
    let k_max = cfg.ks.iter().copied().max().unwrap_or(1);
    let sample = &s.split.samples[i];
    let class = s.split.truth[i].class_v;
    let model = s.model;

    let t = model
        .sample_t_given_shared_split(
            &s.zs_t.select_rows(&[i]),
            n,
            cfg.decoding,
            &mut task_rng(s.seed, T_LATENT, i),
            &mut task_rng(s.seed, T_TOKENS, i),
        )?
        .remove(0);
    let v = model
        .sample_v_given_shared(&s.zs_v.select_rows(&[i]), n, &mut task_rng(s.seed, V_LATENT, i))?
        .remove(0)
        .to_rows();

    let mut pick = task_rng(s.seed, BASE_PICK, i);
    let m = s.split.len();
    let idx: Vec<usize> = (0..k_max).map(|_| pick.random_range(0..m)).collect();
    let base_t: Vec<Vec<usize>> = model
        .sample_t_given_shared_split(
            &s.zs_t.select_rows(&idx),
            1,
            cfg.decoding,
            &mut task_rng(s.seed, BASE_T_LATENT, i),
            &mut task_rng(s.seed, BASE_T_TOKENS, i),
        )?
        .into_iter()
        .flatten()
        .collect();
    let base_v: Vec<Vec<f64>> = model
        .sample_v_given_shared(&s.zs_v.select_rows(&idx), 1, &mut task_rng(s.seed, BASE_V_LATENT, i))?
        .into_iter()
        .flat_map(|x| x.to_rows())
        .collect();

    let dist_t = |xs: &[Vec<usize>]| -> Vec<f64> {
        xs.iter().map(|x| normalized_hamming(x, &sample.x_t)).collect()
    };
    let dist_v = |xs: &[Vec<f64>]| -> Vec<f64> { xs.iter().map(|x| euclidean(x, &sample.x_v)).collect() };
    let (dt, dv, bt, bv) = (dist_t(&t), dist_v(&v), dist_t(&base_t), dist_v(&base_v));
    let per_k = |d: &[f64]| cfg.ks.iter().map(|&k| best_of_k(d, k)).collect::<Vec<_>>();

    let div_t = &t[..cfg.diversity_n];
    let cover_t = &t[..cfg.n_samples];
    let cover_v = &v[..cfg.n_samples];
    let radius = cfg.v_hit_sigmas * s.generator.config().v_sigma;
    Ok(Item {
        class,
        best_t: per_k(&dt),
        best_v: per_k(&dv),
        base_t: per_k(&bt),
        base_v: per_k(&bv),
        uniq_t: uniqueness_t(div_t)?,
        uniq_v: uniqueness_v(&v[..cfg.diversity_n])?,
        overlap: pairwise_overlap(div_t)?,
        distinct_1: distinct_ngrams(div_t, 1),
        distinct_2: distinct_ngrams(div_t, 2),
        cover_t: hit_fraction(&t_modes_hit(s.generator, class, cover_t, cfg.t_margin)?),
        cover_v: hit_fraction(&v_modes_hit(s.generator, s.split.truth[i].class_t, cover_v, radius)?),
        spread_v: if cover_v.len() >= 2 {
            mean_pairwise_distance(cover_v)?
        } else {
            0.0
        },
        ivom: s.ivom[i],
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn aggregate(items: &[&Item], ks: &[usize], diverged: usize) -> Metrics {
    let avg = |f: &dyn Fn(&Item) -> f64| mean(items.iter().map(|it| f(it)));
    let oracle = ks
        .iter()
        .enumerate()
        .map(|(j, &k)| OracleRow {
            k,
            conditional: Directional {
                t_given_v: avg(&|it| it.best_t[j]),
                v_given_t: avg(&|it| it.best_v[j]),
            },
            baseline: Directional {
                t_given_v: avg(&|it| it.base_t[j]),
                v_given_t: avg(&|it| it.base_v[j]),
            },
        })
        .collect();
    Metrics {
        oracle_best_of_k: oracle,
        uniqueness: Directional {
            t_given_v: avg(&|it| it.uniq_t),
            v_given_t: avg(&|it| it.uniq_v),
        },
        pairwise_overlap: avg(&|it| it.overlap),
        distinct_1: avg(&|it| it.distinct_1),
        distinct_2: avg(&|it| it.distinct_2),
        mode_coverage: Directional {
            t_given_v: avg(&|it| it.cover_t),
            v_given_t: avg(&|it| it.cover_v),
        },
        ivom: IvomSummary {
            mean_distance: avg(&|it| it.ivom),
            diverged,
        },
        mean_pairwise_v_distance: avg(&|it| it.spread_v),
    }
}

/// Averages a per-class quantity over classes, so every class weighs the
/// same whatever its share of the test split.
fn class_balanced(per_class: &[ClassReport], f: impl Fn(&Metrics) -> f64) -> f64 {
    mean(per_class.iter().filter(|c| c.items > 0).map(|c| f(&c.metrics)))
}

/// Full metric report on the first `max_items` records of `split`.
///
/// T samples are conditioned on each record's `x_v` and scored against its
/// `x_t`; V samples the other way round. Records are processed in parallel
/// with per-record random streams, so the report depends only on the
/// model, the data and `seed`.
pub fn evaluate(
    model: &Model,
    config_hash: &str,
    split: &Split,
    generator: &Generator,
    config: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    config.validate()?;
    let m = config.max_items.map_or(split.len(), |k| k.min(split.len()));
    if m == 0 {
        return Err(Error::EmptyBatch);
    }
    let split = Split {
        samples: split.samples[..m].to_vec(),
        truth: split.truth[..m].to_vec(),
    };
    let x_v = Tensor::from_rows(&split.samples.iter().map(|s| s.x_v.clone()).collect::<Vec<_>>())?;
    let x_t: Vec<Vec<usize>> = split.samples.iter().map(|s| s.x_t.clone()).collect();
    let part_v = model.partition_v(&x_v)?;
    let part_t = model.partition_t(&x_t)?;
    let zs_t = model.bridge.v_to_t(&model.params, &part_v.zs)?;
    let zs_v = model.bridge.t_to_v(&model.params, &part_t.zs)?;
    let alignment_mse = model.bridge.alignment_mse(&model.params, &part_v.zs, &part_t.zs)?;

    let ivom_result = ivom(model, &x_t, &x_v, &config.ivom, &mut task_rng(seed, IVOM_STARTS, 0))?;

    let shared = Shared {
        model,
        generator,
        config,
        split: &split,
        seed,
        zs_t,
        zs_v,
        ivom: ivom_result.distances,
    };
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(m);
    let chunk = m.div_ceil(threads);
    let items: Vec<Item> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                let shared = &shared;
                scope.spawn(move || {
                    (w * chunk..((w + 1) * chunk).min(m))
                        .map(|i| measure(shared, i))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect::<Result<Vec<Vec<Item>>>>()
    })?
    .into_iter()
    .flatten()
    .collect();

    let n_classes = generator.config().n_classes;
    let per_class: Vec<ClassReport> = (0..n_classes)
        .map(|c| {
            let members: Vec<&Item> = items.iter().filter(|it| it.class == c).collect();
            ClassReport {
                class: c,
                items: members.len(),
                metrics: aggregate(&members, &config.ks, 0),
            }
        })
        .collect();
    let all: Vec<&Item> = items.iter().collect();
    let mut metrics = aggregate(&all, &config.ks, ivom_result.diverged);
    metrics.mode_coverage = Directional {
        t_given_v: class_balanced(&per_class, |x| x.mode_coverage.t_given_v),
        v_given_t: class_balanced(&per_class, |x| x.mode_coverage.v_given_t),
    };
    Ok(EvalReport {
        config_hash: config_hash.to_string(),
        seed,
        items: m,
        metrics,
        alignment_mse,
        per_class,
    })
}
