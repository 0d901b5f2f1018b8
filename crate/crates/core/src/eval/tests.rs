use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{Model, ModelConfig};
use crate::synthia::{generate, GeneratorConfig};
use crate::tensor::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_seqs(r: &mut ChaCha8Rng, n: usize, len: usize, vocab: usize) -> Vec<Vec<usize>> {
    (0..n)
        .map(|_| (0..len).map(|_| r.random_range(0..vocab)).collect())
        .collect()
}

fn brute_overlap(seqs: &[Vec<usize>]) -> f64 {
    let bigrams = |s: &Vec<usize>| -> Vec<(usize, usize)> {
        (0..s.len().saturating_sub(1)).map(|i| (s[i], s[i + 1])).collect()
    };
    let mut total = 0.0;
    let mut pairs = 0.0;
    for i in 0..seqs.len() {
        for j in 0..seqs.len() {
            if i == j {
                continue;
            }
            pairs += 1.0;
            let bi = bigrams(&seqs[i]);
            let mut pool = bigrams(&seqs[j]);
            let mut shared = 0.0;
            for b in &bi {
                if let Some(pos) = pool.iter().position(|x| x == b) {
                    pool.remove(pos);
                    shared += 1.0;
                }
            }
            if !bi.is_empty() {
                total += shared / bi.len() as f64;
            }
        }
    }
    total / pairs
}

#[test]
fn uniqueness_extremes() {
    let same = vec![vec![1, 2, 3]; 5];
    assert_eq!(uniqueness_t(&same).unwrap(), 0.2);
    let distinct: Vec<Vec<usize>> = (0..5).map(|i| vec![i, 0, 0]).collect();
    assert_eq!(uniqueness_t(&distinct).unwrap(), 1.0);
    assert!(uniqueness_t(&same[..1]).is_err());
}

#[test]
fn uniqueness_matches_brute_force_count() {
    let mut r = rng(1);
    for _ in 0..20 {
        let seqs = random_seqs(&mut r, 12, 3, 2);
        let mut distinct = 0;
        for i in 0..seqs.len() {
            if (0..i).all(|j| seqs[j] != seqs[i]) {
                distinct += 1;
            }
        }
        assert_eq!(uniqueness_t(&seqs).unwrap(), distinct as f64 / 12.0);
    }
}

#[test]
fn v_uniqueness_rounds_to_two_decimals() {
    let pts = vec![vec![1.001, 2.0], vec![1.004, 2.0], vec![1.02, 2.0], vec![1.0, -2.0]];
    assert_eq!(uniqueness_v(&pts).unwrap(), 0.75);
}

#[test]
fn overlap_extremes() {
    let a = vec![1, 2, 3, 4];
    assert_eq!(pairwise_overlap(&[a.clone(), a.clone()]).unwrap(), 1.0);
    assert_eq!(pairwise_overlap(&[a, vec![5, 6, 7, 8]]).unwrap(), 0.0);
}

#[test]
fn overlap_matches_enumeration() {
    let mut r = rng(2);
    for _ in 0..50 {
        let seqs = random_seqs(&mut r, 3, 6, 3);
        let got = pairwise_overlap(&seqs).unwrap();
        assert!((got - brute_overlap(&seqs)).abs() < 1e-12, "{seqs:?}");
    }
}

#[test]
fn distinct_ngrams_cases() {
    assert_eq!(distinct_ngrams(&[vec![4; 6]], 1), 1.0 / 6.0);
    assert_eq!(distinct_ngrams(&[vec![0, 1, 2], vec![3, 4, 5]], 1), 1.0);
    let mut r = rng(3);
    for n in 1..=3 {
        let seqs = random_seqs(&mut r, 5, 6, 3);
        let all: Vec<Vec<usize>> = seqs
            .iter()
            .flat_map(|s| (0..=s.len() - n).map(move |i| s[i..i + n].to_vec()))
            .collect();
        let mut uniq = all.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(distinct_ngrams(&seqs, n), uniq.len() as f64 / all.len() as f64);
    }
}

#[test]
fn best_of_k_is_monotone_and_zero_on_target() {
    let target = vec![3, 1, 4, 1, 5, 9];
    let mut r = rng(4);
    let mut cands = random_seqs(&mut r, 50, 6, 10);
    let d: Vec<f64> = cands.iter().map(|c| normalized_hamming(c, &target)).collect();
    for k in 1..50 {
        assert!(best_of_k(&d, k) >= best_of_k(&d, k + 1));
    }
    cands[17] = target.clone();
    let d: Vec<f64> = cands.iter().map(|c| normalized_hamming(c, &target)).collect();
    assert_eq!(best_of_k(&d, 50), 0.0);
    assert_eq!(normalized_hamming(&[1, 2, 3, 4], &[1, 0, 3]), 0.5);
}

#[test]
fn mode_coverage_cases() {
    let g = Generator::new(GeneratorConfig::default()).unwrap();
    let (centers, templates) = g.truth_modes(2).unwrap();
    let at_all: Vec<Vec<f64>> = centers.iter().map(|c| c.to_vec()).collect();
    assert_eq!(hit_fraction(&v_modes_hit(&g, 2, &at_all, 0.24).unwrap()), 1.0);
    let at_one = vec![centers[1].to_vec(); 10];
    assert_eq!(hit_fraction(&v_modes_hit(&g, 2, &at_one, 0.24).unwrap()), 1.0 / 3.0);
    let near = vec![vec![centers[0][0] + 0.3, centers[0][1]]];
    assert_eq!(hit_fraction(&v_modes_hit(&g, 2, &near, 0.24).unwrap()), 0.0);

    assert_eq!(hit_fraction(&t_modes_hit(&g, 2, templates, 1).unwrap()), 1.0);
    let one = vec![templates[0].clone(); 7];
    assert_eq!(hit_fraction(&t_modes_hit(&g, 2, &one, 1).unwrap()), 1.0 / 3.0);
    // A template of another class never counts.
    let (_, other) = g.truth_modes(0).unwrap();
    assert_eq!(hit_fraction(&t_modes_hit(&g, 2, other, 1).unwrap()), 0.0);
    assert!(t_modes_hit(&g, 9, &one, 1).is_err());
}

#[test]
fn mode_hits_respect_the_margin() {
    let g = Generator::new(GeneratorConfig::default()).unwrap();
    let (_, templates) = g.truth_modes(1).unwrap();
    for (p, t) in templates.iter().enumerate() {
        for pos in 0..t.len() {
            let mut s = t.clone();
            s[pos] = (s[pos] + 1) % 16;
            if let Some((c, q, d)) = g.classify_t(&s) {
                let hit = t_modes_hit(&g, 1, &[s.clone()], 1).unwrap();
                assert_eq!(hit[p], c == 1 && q == p && d <= 1);
                assert!(!t_modes_hit(&g, 1, &[s], 0).unwrap()[p]);
            }
        }
    }
}

#[test]
fn mean_pairwise_distance_matches_enumeration() {
    let pts = vec![vec![0.0, 0.0], vec![3.0, 4.0], vec![0.0, 4.0]];
    assert!((mean_pairwise_distance(&pts).unwrap() - 4.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn diversity_metrics_stay_in_unit_interval(
        seqs in prop::collection::vec(prop::collection::vec(0usize..5, 0..7), 2..8),
        n in 1usize..4,
    ) {
        for v in [uniqueness_t(&seqs).unwrap(), pairwise_overlap(&seqs).unwrap(), distinct_ngrams(&seqs, n)] {
            prop_assert!((0.0..=1.0).contains(&v), "{v}");
        }
    }
}

fn small_model(seed: u64) -> Model {
    let mut c = ModelConfig {
        hidden: 16,
        ..ModelConfig::default()
    };
    c.prior_v.blocks = 2;
    c.prior_t.blocks = 2;
    c.bridge.blocks = 2;
    Model::new(c, &mut rng(seed)).unwrap()
}

#[test]
fn ivom_reaches_a_realizable_target() {
    let model = small_model(5);
    let mut r = rng(6);
    let zs = Tensor::randn(4, 6, &mut r);
    let z_true = Tensor::randn(4, 4, &mut r);
    let target = model.decode_v_tensor(&zs, &z_true).unwrap();
    let cfg = IvomConfig {
        steps: 400,
        ..IvomConfig::default()
    };
    let starts = Tensor::randn(4 * cfg.restarts, 4, &mut r);
    let res = ivom_from_shared(&model, &zs, &target, &starts, &cfg).unwrap();
    for d in &res.distances {
        assert!(*d < 1e-2, "{:?}", res.distances);
    }
    let again = model.decode_v_tensor(&zs, &res.latents).unwrap();
    let gap = again.max_abs_diff(&target);
    assert!(gap < 1e-2);
}

#[test]
fn ivom_without_steps_reports_the_start() {
    let model = small_model(7);
    let mut r = rng(8);
    let zs = Tensor::randn(3, 6, &mut r);
    let target = Tensor::randn(3, 2, &mut r);
    let cfg = IvomConfig {
        steps: 0,
        restarts: 1,
        ..IvomConfig::default()
    };
    let starts = Tensor::randn(3, 4, &mut r);
    let res = ivom_from_shared(&model, &zs, &target, &starts, &cfg).unwrap();
    let x = model.decode_v_tensor(&zs, &starts).unwrap();
    for i in 0..3 {
        assert_eq!(res.distances[i], euclidean(x.row_slice(i), target.row_slice(i)));
    }
    assert_eq!(res.latents, starts);
}

#[test]
fn prefix_samples_do_not_depend_on_count() {
    let model = small_model(9);
    let zs = Tensor::randn(1, 6, &mut rng(10));
    let d = crate::model::Decoding::default();
    let few = model
        .sample_t_given_shared_split(&zs, 10, d, &mut rng(11), &mut rng(12))
        .unwrap();
    let many = model
        .sample_t_given_shared_split(&zs, 30, d, &mut rng(11), &mut rng(12))
        .unwrap();
    assert_eq!(few[0][..], many[0][..10]);
    let vf = model.sample_v_given_shared(&zs, 10, &mut rng(13)).unwrap();
    let vm = model.sample_v_given_shared(&zs, 30, &mut rng(13)).unwrap();
    assert_eq!(vf[0].data(), &vm[0].data()[..20]);
}

fn small_eval() -> EvalConfig {
    EvalConfig {
        n_samples: 6,
        diversity_n: 4,
        ks: vec![1, 8],
        max_items: Some(10),
        ivom: IvomConfig {
            steps: 5,
            restarts: 2,
            ..IvomConfig::default()
        },
        ..EvalConfig::default()
    }
}

#[test]
fn evaluation_is_deterministic_and_complete() {
    let model = small_model(14);
    let data = generate(&GeneratorConfig {
        n_train: 10,
        n_test: 12,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let g = Generator::new(data.config.clone()).unwrap();
    let cfg = small_eval();
    let a = evaluate(&model, "abc", &data.test, &g, &cfg, 3).unwrap();
    let b = evaluate(&model, "abc", &data.test, &g, &cfg, 3).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.items, 10);
    assert_eq!(a.per_class.iter().map(|c| c.items).sum::<usize>(), 10);
    let json = serde_json::to_value(&a).unwrap();
    for key in METRIC_KEYS {
        assert!(json["metrics"].get(key).is_some(), "missing {key}");
    }
    let m = &a.metrics;
    for v in [m.uniqueness.t_given_v, m.pairwise_overlap, m.distinct_1, m.distinct_2] {
        assert!((0.0..=1.0).contains(&v));
    }
    let o = &m.oracle_best_of_k;
    assert!(o[0].conditional.t_given_v >= o[1].conditional.t_given_v);
    assert!(o[0].conditional.v_given_t >= o[1].conditional.v_given_t);
}

#[test]
fn mode_coverage_grows_with_sample_count() {
    let model = small_model(15);
    let data = generate(&GeneratorConfig {
        n_train: 10,
        n_test: 12,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let g = Generator::new(data.config.clone()).unwrap();
    let mut prev = Directional::default();
    for n in [1, 4, 16] {
        let cfg = EvalConfig {
            n_samples: n,
            ks: vec![16],
            v_hit_sigmas: 12.0,
            t_margin: 3,
            ..small_eval()
        };
        let c = evaluate(&model, "", &data.test, &g, &cfg, 4).unwrap().metrics.mode_coverage;
        assert!(c.t_given_v >= prev.t_given_v && c.v_given_t >= prev.v_given_t);
        prev = c;
    }
}
