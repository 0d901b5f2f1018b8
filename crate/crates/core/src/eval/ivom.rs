use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{recon_loss_v, Model};
use crate::tensor::Tensor;

/// Inference-via-optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IvomConfig {
    pub steps: usize,
    pub lr: f64,
    pub restarts: usize,
    /// A run whose loss rises this many steps in a row is flagged diverged.
    pub divergence_window: usize,
}

impl Default for IvomConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 0.05,
            restarts: 5,
            divergence_window: 50,
        }
    }
}

impl IvomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 || self.lr.is_nan() || self.lr <= 0.0 || self.divergence_window == 0 {
            return Err(Error::Config(
                "eval.ivom: need restarts ≥ 1, lr > 0, divergence_window ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IvomResult {
    /// Best final distance per target over restarts.
    pub distances: Vec<f64>,
    /// The `z'_v` achieving it, one row per target.
    pub latents: Tensor,
    /// Runs (target × restart) flagged as diverged.
    pub diverged: usize,
}

/// Closest decoding of each V target reachable by moving `z'_v` with the
/// shared code fixed by the T condition.
pub fn ivom<R: Rng + ?Sized>(
    model: &Model,
    x_cond: &[Vec<usize>],
    x_target: &Tensor,
    config: &IvomConfig,
    rng: &mut R,
) -> Result<IvomResult> {
    let zs = model.shared_t_to_v(x_cond)?;
    let starts = model
        .prior_v
        .sample(&model.params, zs.rows() * config.restarts, Some(&zs.repeat_rows(config.restarts)), rng)?;
    ivom_from_shared(model, &zs, x_target, &starts, config)
}

/// IvOM from explicit starting points: `starts` holds `restarts` rows per
/// target, grouped by target.
pub fn ivom_from_shared(
    model: &Model,
    zs: &Tensor,
    x_target: &Tensor,
    starts: &Tensor,
    config: &IvomConfig,
) -> Result<IvomResult> {
    let m = zs.rows();
    let r = config.restarts;
    if x_target.rows() != m || starts.rows() != m * r {
        return Err(Error::Dim(format!(
            "ivom: {m} conditions, {} targets, {} starts for {r} restarts",
            x_target.rows(),
            starts.rows()
        )));
    }
    let zs = zs.repeat_rows(r);
    let target = x_target.repeat_rows(r);
    let rows = m * r;
    let norm = model.config.v_norm;
    let distances = |z: &Tensor| -> Result<Vec<f64>> {
        let g = Graph::no_grad();
        let x = model.decode_v(&g, g.constant(zs.clone()), g.constant(z.clone()))?;
        Ok(recon_loss_v(g.constant(target.clone()), x, norm)?.value().into_data())
    };

    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut z = starts.clone();
    let mut m1 = vec![0.0; z.len()];
    let mut m2 = vec![0.0; z.len()];
    let mut prev: Option<Vec<f64>> = None;
    let mut rising = vec![0usize; rows];
    let mut diverged = vec![false; rows];
    for t in 1..=config.steps {
        let g = Graph::new();
        let zv = g.leaf(z.clone());
        let x = model.decode_v(&g, g.constant(zs.clone()), zv)?;
        let loss = recon_loss_v(g.constant(target.clone()), x, norm)?;
        let per_row = loss.value().into_data();
        g.backward(loss.sum())?;
        let grad = g.grad(zv);
        if let Some(p) = &prev {
            for i in 0..rows {
                rising[i] = if per_row[i] > p[i] { rising[i] + 1 } else { 0 };
                if rising[i] >= config.divergence_window {
                    diverged[i] = true;
                }
            }
        }
        prev = Some(per_row);
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        let zd = z.data_mut();
        for (i, gi) in grad.data().iter().enumerate() {
            let gi = if gi.is_finite() { *gi } else { 0.0 };
            m1[i] = b1 * m1[i] + (1.0 - b1) * gi;
            m2[i] = b2 * m2[i] + (1.0 - b2) * gi * gi;
            zd[i] -= config.lr * (m1[i] / bc1) / ((m2[i] / bc2).sqrt() + eps);
        }
    }

    let finals = distances(&z)?;
    let mut best = vec![f64::INFINITY; m];
    let mut pick = vec![0usize; m];
    for i in 0..m {
        for k in 0..r {
            let row = i * r + k;
            if finals[row] < best[i] {
                best[i] = finals[row];
                pick[i] = row;
            }
        }
    }
    Ok(IvomResult {
        distances: best,
        latents: z.select_rows(&pick),
        diverged: diverged.iter().filter(|d| **d).count(),
    })
}
