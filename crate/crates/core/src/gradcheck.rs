//! Central-difference gradient checking against the autodiff engine.

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct Coord {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Coord>,
    /// First coordinate where either side was NaN or infinite.
    pub non_finite: Option<Coord>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.non_finite.is_none() && self.max_rel_error < tol
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares autodiff gradients of `loss` with five-point central
/// differences of step `h` (error `O(h⁴)`) at up to `coords_per_param`
/// random entries of each listed parameter.
///
/// `loss` must be deterministic: it is rebuilt from scratch for every probe.
/// The store is restored before returning.
pub fn finite_diff_check<F, R>(
    store: &mut ParamStore,
    params: &[ParamId],
    coords_per_param: usize,
    h: f64,
    rng: &mut R,
    loss: F,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &ParamStore) -> Result<Var<'g>>,
    R: Rng + ?Sized,
{
    let analytic = {
        let g = Graph::new();
        let l = loss(&g, store)?;
        g.backward(l)?;
        g.gradients(store)
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let g = Graph::no_grad();
        Ok(loss(&g, store)?.item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        non_finite: None,
        checked: 0,
    };
    for &id in params {
        let n = store.get(id).len();
        let picks = sample(rng, n, coords_per_param.min(n)).into_vec();
        for index in picks {
            let a = analytic.get(id).map_or(0.0, |g| g.data()[index]);
            let orig = store.get(id).data()[index];
            let mut at = |offset: f64| {
                store.get_mut(id).data_mut()[index] = orig + offset;
                eval(store)
            };
            let (p2, p1, m1, m2) = (at(2.0 * h), at(h), at(-h), at(-2.0 * h));
            store.get_mut(id).data_mut()[index] = orig;
            let numeric = (8.0 * (p1? - m1?) - (p2? - m2?)) / (12.0 * h);
            report.checked += 1;
            let coord = || Coord {
                param: store.name(id).to_string(),
                index,
                analytic: a,
                numeric,
            };
            if !a.is_finite() || !numeric.is_finite() {
                if report.non_finite.is_none() {
                    report.non_finite = Some(coord());
                }
                continue;
            }
            let err = relative_error(a, numeric);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(coord());
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_loss_is_nearly_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let w = store.add("w/x", Tensor::randn(3, 3, &mut rng));
        let ids = [w];
        let report = finite_diff_check(&mut store, &ids, 9, 1e-5, &mut rng, |g, ps| {
            Ok(g.param(ps, w).square().sum().scale(0.5))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-7, "{report:?}");
        assert_eq!(report.checked, 9);
    }

    #[test]
    fn planted_gradient_fault_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let w = store.add("w/x", Tensor::randn(2, 3, &mut rng));
        // The differentiated graph is scaled by 1.1; the probes are not.
        let report = finite_diff_check(&mut store, &[w], 6, 1e-5, &mut rng, |g, ps| {
            let k = if g.grad_enabled() { 1.1 } else { 1.0 };
            Ok(g.param(ps, w).tanh().sum().scale(k))
        })
        .unwrap();
        assert!(report.max_rel_error > 0.05, "{report:?}");
    }

    #[test]
    fn nan_is_reported_with_coordinate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let w = store.add("w/x", Tensor::row(&[1.0]));
        let report = finite_diff_check(&mut store, &[w], 1, 1e-5, &mut rng, |g, ps| {
            let nan = g.constant(Tensor::scalar(f64::NAN));
            g.param(ps, w).sum().mul(nan)
        })
        .unwrap();
        let coord = report.non_finite.clone().unwrap();
        assert_eq!((coord.param.as_str(), coord.index), ("w/x", 0));
        assert!(coord.analytic.is_nan() || coord.numeric.is_nan());
        assert!(!report.passed(1e-4));
    }
}
