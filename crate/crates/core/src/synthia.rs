//! Synthetic paired two-domain data with known conditional modes.
//!
//! A hidden class is shared by both domains. Domain V draws a 2-D point from
//! one of the class's Gaussian styles; domain T picks one of the class's
//! token templates. Everything is a pure function of the config.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_classes: usize,
    pub n_v_styles: usize,
    pub v_sigma: f64,
    pub v_radius: f64,
    pub n_t_phrasings: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub pairing_fraction: f64,
    /// Set from the run seed rather than the data section.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_classes: 4,
            n_v_styles: 3,
            v_sigma: 0.08,
            v_radius: 2.0,
            n_t_phrasings: 3,
            vocab: 16,
            seq_len: 6,
            n_train: 2000,
            n_test: 200,
            pairing_fraction: 1.0,
            seed: 0,
        }
    }
}

/// Model-facing record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub x_v: Vec<f64>,
    pub x_t: Vec<usize>,
    pub paired: bool,
}

/// Generating factors of a record; evaluation only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truth {
    pub class_v: usize,
    pub style: usize,
    pub class_t: usize,
    pub phrasing: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub samples: Vec<PairedSample>,
    pub truth: Vec<Truth>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_paired(&self) -> usize {
        self.samples.iter().filter(|s| s.paired).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub train: Split,
    pub test: Split,
}

/// The generating process, with mode tables precomputed.
#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    centers: Vec<Vec<[f64; 2]>>,
    templates: Vec<Vec<Vec<usize>>>,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_classes == 0 || self.n_v_styles == 0 || self.n_t_phrasings == 0 {
            return bad("n_classes, n_v_styles and n_t_phrasings must be positive".into());
        }
        if !(self.v_sigma > 0.0 && self.v_radius > 0.0) {
            return bad("v_sigma and v_radius must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.pairing_fraction) {
            return bad(format!("pairing_fraction {} outside [0, 1]", self.pairing_fraction));
        }
        if self.seq_len < 2 {
            return bad("seq_len must be at least 2".into());
        }
        if self.vocab <= self.n_classes {
            return bad(format!(
                "vocab {} leaves no filler tokens beyond {} class tokens",
                self.vocab, self.n_classes
            ));
        }
        let modes = self.n_classes * self.n_v_styles;
        let gap = if modes > 1 {
            2.0 * self.v_radius * (PI / modes as f64).sin()
        } else {
            f64::INFINITY
        };
        if gap < 6.0 * self.v_sigma {
            return bad(format!(
                "{modes} V modes on radius {} are {gap:.4} apart, need at least 6·v_sigma = {:.4}",
                self.v_radius,
                6.0 * self.v_sigma
            ));
        }
        Ok(())
    }

    pub fn n_paired_train(&self) -> usize {
        (self.pairing_fraction * self.n_train as f64).floor() as usize
    }
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let s = config.n_v_styles;
        let modes = (config.n_classes * s) as f64;
        let centers = (0..config.n_classes)
            .map(|c| {
                (0..s)
                    .map(|k| {
                        let angle = 2.0 * PI * (c * s + k) as f64 / modes;
                        [config.v_radius * angle.cos(), config.v_radius * angle.sin()]
                    })
                    .collect()
            })
            .collect();
        let templates: Vec<Vec<Vec<usize>>> = (0..config.n_classes)
            .map(|c| (0..config.n_t_phrasings).map(|p| template(&config, c, p)).collect())
            .collect();
        let mut all: Vec<&Vec<usize>> = templates.iter().flatten().collect();
        all.sort();
        all.dedup();
        if all.len() != config.n_classes * config.n_t_phrasings {
            return Err(Error::Config(format!(
                "{} phrasings per class do not give distinct templates at seq_len {}",
                config.n_t_phrasings, config.seq_len
            )));
        }
        Ok(Self {
            config,
            centers,
            templates,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// V mode centers and T templates of `class`.
    #[allow(clippy::type_complexity)]
    pub fn truth_modes(&self, class: usize) -> Result<(&[[f64; 2]], &[Vec<usize>])> {
        if class >= self.config.n_classes {
            return Err(Error::UnknownClass {
                class,
                n_classes: self.config.n_classes,
            });
        }
        Ok((&self.centers[class], &self.templates[class]))
    }

    pub fn all_templates(&self) -> impl Iterator<Item = (usize, usize, &[usize])> {
        self.templates.iter().enumerate().flat_map(|(c, ts)| {
            ts.iter().enumerate().map(move |(p, t)| (c, p, t.as_slice()))
        })
    }

    pub fn all_centers(&self) -> impl Iterator<Item = (usize, usize, [f64; 2])> + '_ {
        self.centers
            .iter()
            .enumerate()
            .flat_map(|(c, cs)| cs.iter().enumerate().map(move |(k, &x)| (c, k, x)))
    }

    pub fn sample_v<R: Rng + ?Sized>(&self, class: usize, style: usize, rng: &mut R) -> Vec<f64> {
        let noise = Normal::new(0.0, self.config.v_sigma).expect("validated sigma");
        let [cx, cy] = self.centers[class][style];
        vec![cx + noise.sample(rng), cy + noise.sample(rng)]
    }

    /// Nearest V center as `(class, style)`.
    pub fn classify_v(&self, x: &[f64]) -> (usize, usize) {
        let mut best = (0, 0, f64::INFINITY);
        for (c, k, [cx, cy]) in self.all_centers() {
            let d = (x[0] - cx).powi(2) + (x[1] - cy).powi(2);
            if d < best.2 {
                best = (c, k, d);
            }
        }
        (best.0, best.1)
    }

    /// Nearest template by Hamming distance as `(class, phrasing, distance)`.
    /// Returns `None` when the two best templates are equally close.
    pub fn classify_t(&self, x: &[usize]) -> Option<(usize, usize, usize)> {
        let mut scored: Vec<(usize, usize, usize)> = self
            .all_templates()
            .map(|(c, p, t)| (hamming(x, t), c, p))
            .collect();
        scored.sort_unstable();
        match scored.as_slice() {
            [(d0, ..), (d1, ..), ..] if d0 == d1 => None,
            [(d, c, p), ..] => Some((*c, *p, *d)),
            [] => None,
        }
    }

    fn draw<R: Rng + ?Sized>(&self, paired: bool, rng: &mut R) -> (PairedSample, Truth) {
        let cfg = &self.config;
        let class_v = rng.random_range(0..cfg.n_classes);
        let style = rng.random_range(0..cfg.n_v_styles);
        let class_t = if paired {
            class_v
        } else {
            rng.random_range(0..cfg.n_classes)
        };
        let phrasing = rng.random_range(0..cfg.n_t_phrasings);
        let x_v = self.sample_v(class_v, style, rng);
        let sample = PairedSample {
            x_v,
            x_t: self.templates[class_t][phrasing].clone(),
            paired,
        };
        (
            sample,
            Truth {
                class_v,
                style,
                class_t,
                phrasing,
            },
        )
    }

    fn split<R: Rng + ?Sized>(&self, n: usize, n_paired: usize, rng: &mut R) -> Split {
        let mut flags: Vec<bool> = (0..n).map(|i| i < n_paired).collect();
        flags.shuffle(rng);
        let (samples, truth) = flags.into_iter().map(|p| self.draw(p, rng)).unzip();
        Split { samples, truth }
    }

    pub fn generate(&self) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let train = self.split(self.config.n_train, self.config.n_paired_train(), &mut rng);
        let test = self.split(self.config.n_test, self.config.n_test, &mut rng);
        Dataset {
            config: self.config.clone(),
            train,
            test,
        }
    }
}

pub fn generate(config: &GeneratorConfig) -> Result<Dataset> {
    Ok(Generator::new(config.clone())?.generate())
}

/// Template for `(class, phrasing)`: the class token sits at position
/// `(2p + 1) mod L`; the other slots hold filler tokens whose choice depends
/// on phrasing, slot and class.
fn template(cfg: &GeneratorConfig, class: usize, phrasing: usize) -> Vec<usize> {
    let l = cfg.seq_len;
    let fillers = cfg.vocab - cfg.n_classes;
    let class_pos = (2 * phrasing + 1) % l;
    let mut out = Vec::with_capacity(l);
    let mut k = 0;
    for pos in 0..l {
        if pos == class_pos {
            out.push(class);
        } else {
            out.push(cfg.n_classes + (phrasing * (l - 1) + k + class) % fillers);
            k += 1;
        }
    }
    out
}

pub fn hamming(a: &[usize], b: &[usize]) -> usize {
    let common = a.len().min(b.len());
    let diff = a.iter().zip(b).filter(|(x, y)| x != y).count();
    diff + a.len().max(b.len()) - common
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(pairing: f64) -> GeneratorConfig {
        GeneratorConfig {
            n_train: 200,
            n_test: 20,
            pairing_fraction: pairing,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn boundary_pairing_fractions() {
        let all = generate(&small(1.0)).unwrap();
        assert_eq!(all.train.n_paired(), 200);
        let none = generate(&small(0.0)).unwrap();
        assert_eq!(none.train.n_paired(), 0);
        assert_eq!(none.test.n_paired(), 20);
    }

    #[test]
    fn paired_count_rounds_down() {
        let mut cfg = small(0.3);
        cfg.n_train = 2001;
        assert_eq!(generate(&cfg).unwrap().train.n_paired(), 600);
    }

    #[test]
    fn same_seed_same_data() {
        assert_eq!(generate(&small(0.5)).unwrap(), generate(&small(0.5)).unwrap());
        let mut other = small(0.5);
        other.seed = 1;
        assert_ne!(generate(&small(0.5)).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn paired_records_share_class() {
        let d = generate(&small(0.5)).unwrap();
        for (s, t) in d.train.samples.iter().zip(&d.train.truth) {
            if s.paired {
                assert_eq!(t.class_v, t.class_t);
            }
        }
        // Independent draws disagree on class most of the time.
        let unpaired_mismatch = d
            .train
            .samples
            .iter()
            .zip(&d.train.truth)
            .filter(|(s, t)| !s.paired && t.class_v != t.class_t)
            .count();
        assert!(unpaired_mismatch > 30);
    }

    #[test]
    fn crowded_modes_are_rejected() {
        let cfg = GeneratorConfig {
            n_classes: 20,
            n_v_styles: 5,
            ..GeneratorConfig::default()
        };
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn truth_modes_echo_config() {
        let g = Generator::new(GeneratorConfig::default()).unwrap();
        for c in 0..4 {
            let (centers, templates) = g.truth_modes(c).unwrap();
            assert_eq!(centers.len(), 3);
            assert_eq!(templates.len(), 3);
            for [x, y] in centers {
                assert!(((x * x + y * y).sqrt() - 2.0).abs() < 1e-12);
            }
            for t in templates {
                assert_eq!(t.len(), 6);
                assert!(t.iter().all(|&tok| tok < 16));
            }
        }
        assert!(matches!(g.truth_modes(4), Err(Error::UnknownClass { class: 4, .. })));
    }

    #[test]
    fn modes_are_well_separated() {
        let g = Generator::new(GeneratorConfig::default()).unwrap();
        let centers: Vec<_> = g.all_centers().map(|(_, _, x)| x).collect();
        for i in 0..centers.len() {
            for j in i + 1..centers.len() {
                let d = ((centers[i][0] - centers[j][0]).powi(2) + (centers[i][1] - centers[j][1]).powi(2)).sqrt();
                assert!(d >= 6.0 * 0.08);
            }
        }
        let templates: Vec<_> = g.all_templates().map(|(_, _, t)| t.to_vec()).collect();
        for i in 0..templates.len() {
            for j in i + 1..templates.len() {
                assert!(hamming(&templates[i], &templates[j]) >= 2);
            }
        }
    }

    #[test]
    fn style_means_match_centers() {
        let g = Generator::new(GeneratorConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let se = 0.08 / (n as f64).sqrt();
        for (c, k, [cx, cy]) in g.all_centers() {
            let (mut sx, mut sy) = (0.0, 0.0);
            for _ in 0..n {
                let x = g.sample_v(c, k, &mut rng);
                sx += x[0];
                sy += x[1];
            }
            assert!((sx / n as f64 - cx).abs() < 3.0 * se);
            assert!((sy / n as f64 - cy).abs() < 3.0 * se);
        }
    }

    #[test]
    fn nearest_center_recovers_hidden_truth() {
        let g = Generator::new(GeneratorConfig {
            n_train: 1000,
            ..GeneratorConfig::default()
        })
        .unwrap();
        let d = g.generate();
        let agree = d
            .train
            .samples
            .iter()
            .zip(&d.train.truth)
            .filter(|(s, t)| g.classify_v(&s.x_v) == (t.class_v, t.style))
            .count();
        assert!(agree as f64 >= 0.99 * 1000.0);
    }

    #[test]
    fn t_samples_take_exactly_the_templates() {
        let d = generate(&small(1.0)).unwrap();
        let g = Generator::new(small(1.0)).unwrap();
        for (s, t) in d.train.samples.iter().zip(&d.train.truth) {
            assert_eq!(g.classify_t(&s.x_t), Some((t.class_t, t.phrasing, 0)));
        }
    }

    #[test]
    fn hamming_counts_length_difference() {
        assert_eq!(hamming(&[1, 2, 3], &[1, 5, 3]), 1);
        assert_eq!(hamming(&[1, 2], &[1, 2, 3, 4]), 2);
    }
}
