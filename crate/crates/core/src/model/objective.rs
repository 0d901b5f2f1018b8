use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{kl_shared_uniform, Model, Posterior};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::synthia::PairedSample;
use crate::tensor::Tensor;

pub const TERM_NAMES: [&str; 6] = ["kl_shared", "kl_t", "kl_v", "rec_t", "rec_v", "align"];

/// Shared code a paired record's decoders and priors see.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharedCode {
    /// Each domain uses its own encoder's `z_s`.
    Own,
    /// `q(z_s | x_t, x_v)` is the equal mixture of both encoders' codes,
    /// each carried into the other domain by the bridge. Reconstruction
    /// and prior terms of paired records average over the two components.
    #[default]
    PairMixture,
}

/// Term weights. `kl_t` and `kl_v` ramp linearly from 0 over the first
/// `anneal_steps` optimizer steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveWeights {
    pub kl_shared: f64,
    pub kl_t: f64,
    pub kl_v: f64,
    pub rec_t: f64,
    pub rec_v: f64,
    pub align: f64,
    /// Log-det bonus inside the alignment term.
    pub beta: f64,
    pub anneal_steps: u64,
    pub shared_code: SharedCode,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            kl_shared: 0.01,
            kl_t: 1.0,
            kl_v: 1.0,
            rec_t: 1.0,
            rec_v: 1.0,
            align: 1.0,
            beta: 0.0,
            anneal_steps: 500,
            shared_code: SharedCode::default(),
        }
    }
}

impl ObjectiveWeights {
    pub fn zero() -> Self {
        Self {
            kl_shared: 0.0,
            kl_t: 0.0,
            kl_v: 0.0,
            rec_t: 0.0,
            rec_v: 0.0,
            align: 0.0,
            beta: 0.0,
            anneal_steps: 0,
            shared_code: SharedCode::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in TERM_NAMES.iter().zip(self.as_terms().values()).chain([(&"beta", self.beta)]) {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("objective.{name} = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn as_terms(&self) -> Terms {
        Terms {
            kl_shared: self.kl_shared,
            kl_t: self.kl_t,
            kl_v: self.kl_v,
            rec_t: self.rec_t,
            rec_v: self.rec_v,
            align: self.align,
        }
    }

    /// Weights in effect at optimizer step `step` (0-based).
    pub fn at_step(&self, step: u64) -> Self {
        let ramp = if self.anneal_steps == 0 {
            1.0
        } else {
            (step as f64 / self.anneal_steps as f64).min(1.0)
        };
        Self {
            kl_t: self.kl_t * ramp,
            kl_v: self.kl_v * ramp,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Terms {
    pub kl_shared: f64,
    pub kl_t: f64,
    pub kl_v: f64,
    pub rec_t: f64,
    pub rec_v: f64,
    pub align: f64,
}

impl Terms {
    pub fn values(&self) -> [f64; 6] {
        [self.kl_shared, self.kl_t, self.kl_v, self.rec_t, self.rec_v, self.align]
    }

    pub fn from_values(v: [f64; 6]) -> Self {
        Self {
            kl_shared: v[0],
            kl_t: v[1],
            kl_v: v[2],
            rec_t: v[3],
            rec_v: v[4],
            align: v[5],
        }
    }

    pub fn zip_with(&self, other: &Terms, f: impl Fn(f64, f64) -> f64) -> Terms {
        let (a, b) = (self.values(), other.values());
        Terms::from_values(std::array::from_fn(|i| f(a[i], b[i])))
    }
}

/// Per-term values of one objective evaluation. `raw` terms are batch
/// averages before weighting; `weighted` sum to `total` in term order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermReport {
    pub raw: Terms,
    pub weighted: Terms,
    pub total: f64,
    pub rows: usize,
    pub paired: usize,
}

/// Training records as model inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x_v: Tensor,
    pub x_t: Vec<Vec<usize>>,
    pub paired: Vec<bool>,
}

impl Batch {
    pub fn new(samples: &[&PairedSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.x_v.clone()).collect();
        Ok(Self {
            x_v: Tensor::from_rows(&rows)?,
            x_t: samples.iter().map(|s| s.x_t.clone()).collect(),
            paired: samples.iter().map(|s| s.paired).collect(),
        })
    }

    pub fn from_slice(samples: &[PairedSample]) -> Result<Self> {
        Self::new(&samples.iter().collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.paired.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paired.is_empty()
    }

    pub fn paired_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.paired[i]).collect()
    }
}

/// Reparameterization noise for both domain posteriors.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    pub eps_v: Tensor,
    pub eps_t: Tensor,
}

impl Noise {
    pub fn draw<R: Rng + ?Sized>(model: &Model, rows: usize, rng: &mut R) -> Self {
        Self {
            eps_v: Tensor::randn(rows, model.config.v_prime_dim, rng),
            eps_t: Tensor::randn(rows, model.config.t_prime_dim, rng),
        }
    }

    pub fn zeros(model: &Model, rows: usize) -> Self {
        Self {
            eps_v: Tensor::zeros(rows, model.config.v_prime_dim),
            eps_t: Tensor::zeros(rows, model.config.t_prime_dim),
        }
    }
}

impl<'g> Posterior<'g> {
    /// Rows `idx` of this posterior with `zs` replaced by `code`.
    fn gather_with_code(&self, idx: &[usize], code: Var<'g>) -> Result<Self> {
        Ok(Self {
            zs: code,
            mu: self.mu.gather_rows(idx)?,
            logvar: self.logvar.gather_rows(idx)?,
            z: self.z.gather_rows(idx)?,
        })
    }
}

impl Model {
    /// The full objective, averaged over the batch.
    ///
    /// Every record contributes its V terms (`kl_v`, `rec_v`) and T terms
    /// (`kl_t`, `rec_t`); paired records additionally contribute
    /// `kl_shared` and `align`. Each term is summed over the rows it applies
    /// to and divided by the batch size. Under [`SharedCode::PairMixture`] a
    /// paired record's V and T terms are the mean of the own-code and
    /// bridged-code evaluations.
    pub fn objective<'g>(
        &self,
        g: &'g Graph,
        batch: &Batch,
        noise: &Noise,
        weights: &ObjectiveWeights,
    ) -> Result<(Var<'g>, TermReport)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = batch.len() as f64;
        let x_v = g.constant(batch.x_v.clone());
        let pv = self.encode_v(g, x_v, Some(&noise.eps_v))?;
        let pt = self.encode_t(g, &batch.x_t, Some(&noise.eps_t))?;
        let paired = batch.paired_rows();
        let mix = weights.shared_code == SharedCode::PairMixture && !paired.is_empty();

        // Per-row weight of each record's own-code terms.
        let own: Vec<f64> = batch
            .paired
            .iter()
            .map(|&p| if p && mix { 0.5 } else { 1.0 })
            .collect();
        let own = g.constant(Tensor::from_vec(batch.len(), 1, own)?);
        let mut rec_v = self.recon_v(g, x_v, &pv)?.mul(own)?.sum();
        let mut rec_t = self.recon_t(g, &batch.x_t, &pt)?.mul(own)?.sum();
        let mut kl_v = self.kl_v(g, &pv, &noise.eps_v)?.mul(own)?.sum();
        let mut kl_t = self.kl_t(g, &pt, &noise.eps_t)?.mul(own)?.sum();

        let (kl_shared, align) = if paired.is_empty() {
            (g.constant(Tensor::scalar(0.0)), g.constant(Tensor::scalar(0.0)))
        } else {
            let zv = pv.zs.gather_rows(&paired)?;
            let zt = pt.zs.gather_rows(&paired)?;
            if mix {
                let (v_from_t, _) = self.bridge.map_t_to_v(g, &self.params, zt)?;
                let (t_from_v, _) = self.bridge.map_v_to_t(g, &self.params, zv)?;
                let cv = pv.gather_with_code(&paired, v_from_t)?;
                let ct = pt.gather_with_code(&paired, t_from_v)?;
                let eps_v = noise.eps_v.select_rows(&paired);
                let eps_t = noise.eps_t.select_rows(&paired);
                let seqs: Vec<Vec<usize>> = paired.iter().map(|&i| batch.x_t[i].clone()).collect();
                let xv = g.constant(batch.x_v.select_rows(&paired));
                rec_v = rec_v.add(self.recon_v(g, xv, &cv)?.sum().scale(0.5))?;
                rec_t = rec_t.add(self.recon_t(g, &seqs, &ct)?.sum().scale(0.5))?;
                kl_v = kl_v.add(self.kl_v(g, &cv, &eps_v)?.sum().scale(0.5))?;
                kl_t = kl_t.add(self.kl_t(g, &ct, &eps_t)?.sum().scale(0.5))?;
            }
            let shared = kl_shared_uniform(zv)
                .add(kl_shared_uniform(zt))?
                .scale(0.5)
                .sum();
            let align = self
                .bridge
                .alignment_loss(g, &self.params, zv, zt, weights.beta)?
                .sum();
            (shared, align)
        };

        let terms = [kl_shared, kl_t, kl_v, rec_t, rec_v, align].map(|t| t.scale(1.0 / n));
        let w = weights.as_terms().values();
        let mut total: Option<Var<'g>> = None;
        let mut raw = [0.0; 6];
        let mut weighted = [0.0; 6];
        for i in 0..6 {
            raw[i] = terms[i].item();
            let wt = terms[i].scale(w[i]);
            weighted[i] = wt.item();
            total = Some(match total {
                Some(t) => t.add(wt)?,
                None => wt,
            });
        }
        let total = total.expect("six terms");
        let report = TermReport {
            raw: Terms::from_values(raw),
            weighted: Terms::from_values(weighted),
            total: total.item(),
            rows: batch.len(),
            paired: paired.len(),
        };
        Ok((total, report))
    }

    /// Objective value and report without building gradients.
    pub fn evaluate_objective(
        &self,
        batch: &Batch,
        noise: &Noise,
        weights: &ObjectiveWeights,
    ) -> Result<TermReport> {
        let g = Graph::no_grad();
        Ok(self.objective(&g, batch, noise, weights)?.1)
    }
}
