use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Model;
use crate::autodiff::{softmax, Graph};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Decoding {
    pub greedy: bool,
    pub temperature: f64,
}

impl Default for Decoding {
    fn default() -> Self {
        Self {
            greedy: false,
            temperature: 1.0,
        }
    }
}

fn draw_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

impl Model {
    pub fn decode_v_tensor(&self, zs: &Tensor, z: &Tensor) -> Result<Tensor> {
        let g = Graph::no_grad();
        Ok(self
            .decode_v(&g, g.constant(zs.clone()), g.constant(z.clone()))?
            .value())
    }

    /// Autoregressive decoding of `[z_s ; z'_t]` rows into token sequences.
    ///
    /// Sampling consumes `seq_len` uniforms per row, row by row, so the
    /// first `k` rows decode identically whatever the total row count.
    pub fn decode_t_tokens<R: Rng + ?Sized>(
        &self,
        zs: &Tensor,
        z: &Tensor,
        decoding: Decoding,
        rng: &mut R,
    ) -> Result<Vec<Vec<usize>>> {
        let g = Graph::no_grad();
        let rows = zs.rows();
        let len = self.config.seq_len;
        let uniforms: Vec<f64> = if decoding.greedy {
            Vec::new()
        } else {
            (0..rows * len).map(|_| rng.random()).collect()
        };
        let latent = g.concat_cols(&[g.constant(zs.clone()), g.constant(z.clone())])?;
        let mut h = self.text_init(&g, latent)?;
        let mut prev = vec![self.bos(); rows];
        let mut out = vec![Vec::with_capacity(len); rows];
        for j in 0..len {
            let (h2, logits) = self.text_step(&g, &prev, latent, h)?;
            h = h2;
            let logits = logits.value();
            for (r, seq) in out.iter_mut().enumerate() {
                let row = logits.row_slice(r);
                let tok = if decoding.greedy {
                    argmax(row)
                } else {
                    let scaled: Vec<f64> = row.iter().map(|v| v / decoding.temperature).collect();
                    draw_index(&softmax(&scaled), uniforms[r * len + j])
                };
                seq.push(tok);
                prev[r] = tok;
            }
        }
        Ok(out)
    }

    /// Shared slice of `x_v` carried into the T domain, one row per input.
    pub fn shared_v_to_t(&self, x_v: &Tensor) -> Result<Tensor> {
        let part = self.partition_v(x_v)?;
        self.bridge.v_to_t(&self.params, &part.zs)
    }

    pub fn shared_t_to_v(&self, x_t: &[Vec<usize>]) -> Result<Tensor> {
        let part = self.partition_t(x_t)?;
        self.bridge.t_to_v(&self.params, &part.zs)
    }

    /// `n` token sequences per row of `x_v`: map the V shared slice through
    /// the bridge, draw `z'_t` from the conditional T prior, decode.
    pub fn sample_t_given_v<R: Rng + ?Sized>(
        &self,
        x_v: &Tensor,
        n: usize,
        decoding: Decoding,
        rng: &mut R,
    ) -> Result<Vec<Vec<Vec<usize>>>> {
        let zs = self.shared_v_to_t(x_v)?;
        self.sample_t_given_shared(&zs, n, decoding, rng)
    }

    pub fn sample_t_given_shared<R: Rng + ?Sized>(
        &self,
        zs: &Tensor,
        n: usize,
        decoding: Decoding,
        rng: &mut R,
    ) -> Result<Vec<Vec<Vec<usize>>>> {
        let zs = zs.repeat_rows(n);
        let z = self.prior_t.sample(&self.params, zs.rows(), Some(&zs), rng)?;
        let seqs = self.decode_t_tokens(&zs, &z, decoding, rng)?;
        Ok(seqs.chunks(n.max(1)).map(<[_]>::to_vec).collect())
    }

    /// As [`Model::sample_t_given_shared`] with separate streams for the
    /// prior draws and the token draws. For a single row of `zs` the first
    /// `k` samples are then the same for every `n ≥ k`.
    pub fn sample_t_given_shared_split<R1: Rng + ?Sized, R2: Rng + ?Sized>(
        &self,
        zs: &Tensor,
        n: usize,
        decoding: Decoding,
        latent_rng: &mut R1,
        token_rng: &mut R2,
    ) -> Result<Vec<Vec<Vec<usize>>>> {
        let zs = zs.repeat_rows(n);
        let z = self.prior_t.sample(&self.params, zs.rows(), Some(&zs), latent_rng)?;
        let seqs = self.decode_t_tokens(&zs, &z, decoding, token_rng)?;
        Ok(seqs.chunks(n.max(1)).map(<[_]>::to_vec).collect())
    }

    /// `n` V samples per input sequence, as one `[n, x_dim]` tensor each.
    pub fn sample_v_given_t<R: Rng + ?Sized>(
        &self,
        x_t: &[Vec<usize>],
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<Tensor>> {
        let zs = self.shared_t_to_v(x_t)?;
        self.sample_v_given_shared(&zs, n, rng)
    }

    pub fn sample_v_given_shared<R: Rng + ?Sized>(
        &self,
        zs: &Tensor,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<Tensor>> {
        let m = zs.rows();
        let zs = zs.repeat_rows(n);
        let z = self.prior_v.sample(&self.params, zs.rows(), Some(&zs), rng)?;
        let x = self.decode_v_tensor(&zs, &z)?;
        Ok((0..m)
            .map(|i| x.select_rows(&(i * n..(i + 1) * n).collect::<Vec<_>>()))
            .collect())
    }
}
