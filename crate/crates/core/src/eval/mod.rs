//! Accuracy and diversity metrics over conditional samples, measured
//! against the generator's known modes.

mod ivom;
mod report;

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Decoding;
use crate::synthia::{hamming, Generator};

pub use ivom::{ivom, ivom_from_shared, IvomConfig, IvomResult};
pub use report::{
    evaluate, ClassReport, Directional, EvalReport, IvomSummary, Metrics, OracleRow, METRIC_KEYS,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Samples per condition for mode coverage and V spread.
    pub n_samples: usize,
    /// Samples per condition for uniqueness, overlap and distinct n-grams.
    pub diversity_n: usize,
    /// Candidate counts for the best-of-k oracle.
    pub ks: Vec<usize>,
    /// A V mode is hit by a sample within this many `v_sigma` of its center.
    pub v_hit_sigmas: f64,
    /// Largest Hamming distance at which a T sample still counts as its
    /// nearest template.
    pub t_margin: usize,
    pub decoding: Decoding,
    pub ivom: IvomConfig,
    /// Evaluate only the first this-many test records.
    pub max_items: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 50,
            diversity_n: 20,
            ks: vec![1, 20, 100],
            v_hit_sigmas: 3.0,
            t_margin: 1,
            decoding: Decoding::default(),
            ivom: IvomConfig::default(),
            max_items: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("eval: {m}")));
        if self.n_samples == 0 {
            return bad("n_samples must be positive");
        }
        if self.diversity_n < 2 {
            return bad("diversity_n must be at least 2");
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return bad("ks must be a non-empty list of positive counts");
        }
        if self.v_hit_sigmas.is_nan() || self.v_hit_sigmas <= 0.0 {
            return bad("v_hit_sigmas must be positive");
        }
        if self.decoding.temperature.is_nan() || self.decoding.temperature <= 0.0 {
            return bad("decoding.temperature must be positive");
        }
        if self.max_items == Some(0) {
            return bad("max_items must be positive");
        }
        self.ivom.validate()
    }

    /// Largest per-condition sample count any metric needs.
    pub fn samples_needed(&self) -> usize {
        let k = self.ks.iter().copied().max().unwrap_or(1);
        k.max(self.n_samples).max(self.diversity_n)
    }
}

fn need_two(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::Data(format!("need at least 2 samples, got {n}")));
    }
    Ok(())
}

/// Hamming distance over the longer length, divided by that length.
pub fn normalized_hamming(a: &[usize], b: &[usize]) -> f64 {
    let len = a.len().max(b.len());
    if len == 0 {
        return 0.0;
    }
    let common = a.len().min(b.len());
    (hamming(&a[..common], &b[..common]) + len - common) as f64 / len as f64
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Smallest of the first `k` distances.
pub fn best_of_k(distances: &[f64], k: usize) -> f64 {
    distances[..k.min(distances.len())]
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Distinct sequences over sample count.
pub fn uniqueness_t(samples: &[Vec<usize>]) -> Result<f64> {
    need_two(samples.len())?;
    let distinct: HashSet<&Vec<usize>> = samples.iter().collect();
    Ok(distinct.len() as f64 / samples.len() as f64)
}

/// Distinct points after rounding every coordinate to two decimals, over
/// sample count.
pub fn uniqueness_v(samples: &[Vec<f64>]) -> Result<f64> {
    need_two(samples.len())?;
    let distinct: HashSet<Vec<i64>> = samples
        .iter()
        .map(|x| x.iter().map(|v| (v * 100.0).round() as i64).collect())
        .collect();
    Ok(distinct.len() as f64 / samples.len() as f64)
}

fn ngram_counts(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    if n > 0 && seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Mean over ordered pairs `(i, j)`, `i ≠ j`, of the share of `i`'s bigrams
/// that also occur in `j` (counts clipped as in BLEU). Lower is more
/// diverse.
pub fn pairwise_overlap(samples: &[Vec<usize>]) -> Result<f64> {
    need_two(samples.len())?;
    let counts: Vec<_> = samples.iter().map(|s| ngram_counts(s, 2)).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (i, ci) in counts.iter().enumerate() {
        let n_i: usize = ci.values().sum();
        for (j, cj) in counts.iter().enumerate() {
            if i == j {
                continue;
            }
            pairs += 1;
            if n_i == 0 {
                continue;
            }
            let shared: usize = ci
                .iter()
                .map(|(g, c)| (*c).min(cj.get(g).copied().unwrap_or(0)))
                .sum();
            total += shared as f64 / n_i as f64;
        }
    }
    Ok(total / pairs as f64)
}

/// Distinct n-grams over total n-grams, pooled across `samples`.
pub fn distinct_ngrams(samples: &[Vec<usize>], n: usize) -> f64 {
    let mut distinct = HashSet::new();
    let mut total = 0usize;
    for s in samples {
        if n == 0 || s.len() < n {
            continue;
        }
        for w in s.windows(n) {
            distinct.insert(w);
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        distinct.len() as f64 / total as f64
    }
}

/// Which of `class`'s templates the samples hit. A sample hits the template
/// it is uniquely nearest to, provided it lies within `margin`.
pub fn t_modes_hit(
    generator: &Generator,
    class: usize,
    samples: &[Vec<usize>],
    margin: usize,
) -> Result<Vec<bool>> {
    let (_, templates) = generator.truth_modes(class)?;
    let mut hit = vec![false; templates.len()];
    for s in samples {
        if let Some((c, p, d)) = generator.classify_t(s) {
            if c == class && d <= margin {
                hit[p] = true;
            }
        }
    }
    Ok(hit)
}

/// Which of `class`'s V centers have a sample within `radius`.
pub fn v_modes_hit(
    generator: &Generator,
    class: usize,
    samples: &[Vec<f64>],
    radius: f64,
) -> Result<Vec<bool>> {
    let (centers, _) = generator.truth_modes(class)?;
    Ok(centers
        .iter()
        .map(|c| samples.iter().any(|x| euclidean(x, c) <= radius))
        .collect())
}

pub fn hit_fraction(hits: &[bool]) -> f64 {
    if hits.is_empty() {
        return 0.0;
    }
    hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64
}

/// Mean Euclidean distance over unordered pairs.
pub fn mean_pairwise_distance(points: &[Vec<f64>]) -> Result<f64> {
    need_two(points.len())?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            total += euclidean(&points[i], &points[j]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[cfg(test)]
mod tests;
