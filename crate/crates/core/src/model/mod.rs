//! Two domain autoencoders with a factorized latent `z = [z_s ; z']`,
//! conditional flow priors `p(z' | z_s)` and the shared-latent bridge.
//!
//! Domain V is a small real vector, domain T a fixed-length token sequence.

mod objective;
mod sample;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use objective::{Batch, Noise, ObjectiveWeights, SharedCode, TermReport, Terms, TERM_NAMES};
pub use sample::Decoding;

use crate::autodiff::{Graph, Var};
use crate::bridge::{Bridge, BridgeConfig};
use crate::error::{Error, Result};
use crate::flows::{BlockRecipe, FlowStack, StackSpec};
use crate::nn::{Embedding, GruCell, Linear, Mlp};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub blocks: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub clamp: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            blocks: 8,
            hidden: 64,
            hidden_layers: 2,
            clamp: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub shared_dim: usize,
    pub v_prime_dim: usize,
    pub t_prime_dim: usize,
    pub x_dim: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub logvar_min: f64,
    pub logvar_max: f64,
    pub v_norm: Norm,
    pub prior_v: PriorConfig,
    pub prior_t: PriorConfig,
    pub bridge: BridgeConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            shared_dim: 6,
            v_prime_dim: 4,
            t_prime_dim: 3,
            x_dim: 2,
            vocab: 16,
            seq_len: 6,
            hidden: 64,
            embed_dim: 16,
            logvar_min: -8.0,
            logvar_max: 4.0,
            v_norm: Norm::L2,
            prior_v: PriorConfig::default(),
            prior_t: PriorConfig::default(),
            bridge: BridgeConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("shared_dim", self.shared_dim),
            ("v_prime_dim", self.v_prime_dim),
            ("t_prime_dim", self.t_prime_dim),
            ("x_dim", self.x_dim),
            ("vocab", self.vocab),
            ("seq_len", self.seq_len),
            ("hidden", self.hidden),
            ("embed_dim", self.embed_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        for (name, d) in [
            ("shared_dim", self.shared_dim),
            ("v_prime_dim", self.v_prime_dim),
            ("t_prime_dim", self.t_prime_dim),
        ] {
            if d < 2 {
                return Err(Error::Config(format!(
                    "model.{name} = {d}: coupling layers need at least 2 dims"
                )));
            }
        }
        if self.logvar_min >= self.logvar_max {
            return Err(Error::Config("model.logvar_min must be below logvar_max".into()));
        }
        Ok(())
    }
}

/// Posterior over one domain's latent. `z_s` is deterministic; `z'` is a
/// diagonal Gaussian, and `z` is its reparameterized draw (`μ'` when no
/// noise was supplied).
#[derive(Clone, Copy)]
pub struct Posterior<'g> {
    pub zs: Var<'g>,
    pub mu: Var<'g>,
    pub logvar: Var<'g>,
    pub z: Var<'g>,
}

/// Posterior parameters as plain tensors.
#[derive(Clone, Debug)]
pub struct LatentPartition {
    pub zs: Tensor,
    pub mu: Tensor,
    pub logvar: Tensor,
}

#[derive(Clone, Debug)]
struct TextDecoder {
    embed: Embedding,
    init: Linear,
    cell: GruCell,
    out: Linear,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    enc_v: Mlp,
    dec_v: Mlp,
    enc_t_embed: Embedding,
    enc_t: Mlp,
    dec_t: TextDecoder,
    pub prior_v: FlowStack,
    pub prior_t: FlowStack,
    pub bridge: Bridge,
}

/// Per-row `‖x - x̃‖` in the given norm, `[B, 1]`.
pub fn recon_loss_v<'g>(x: Var<'g>, x_hat: Var<'g>, norm: Norm) -> Result<Var<'g>> {
    let d = x.sub(x_hat)?;
    Ok(match norm {
        Norm::L1 => d.norm_l1_rows(),
        Norm::L2 => d.norm_l2_rows(),
    })
}

/// Per-row `-Σ_j log p(x_j | x_<j)` from one logits node per position.
pub fn sequence_nll<'g>(logits: &[Var<'g>], targets: &[Vec<usize>]) -> Result<Var<'g>> {
    let mut total: Option<Var<'g>> = None;
    for (j, l) in logits.iter().enumerate() {
        let col: Vec<usize> = targets.iter().map(|t| t[j]).collect();
        let ce = l.cross_entropy(&col)?;
        total = Some(match total {
            Some(t) => t.add(ce)?,
            None => ce,
        });
    }
    total.ok_or(Error::EmptyBatch)
}

/// `mean_d z_s²` per row.
pub fn kl_shared_uniform(zs: Var<'_>) -> Var<'_> {
    zs.square().mean_cols()
}

/// Log density of the reparameterized draw under its own diagonal Gaussian:
/// with `z = μ + σ ε`, `log q(z) = Σ_d (-ε²/2 - ln(2π)/2 - logvar/2)`.
pub fn gaussian_log_q<'g>(g: &'g Graph, logvar: Var<'g>, eps: &Tensor) -> Result<Var<'g>> {
    let d = eps.cols() as f64;
    let quad: Vec<f64> = (0..eps.rows())
        .map(|r| -0.5 * eps.row_slice(r).iter().map(|e| e * e).sum::<f64>() - 0.5 * d * LN_2PI)
        .collect();
    let quad = g.constant(Tensor::from_vec(eps.rows(), 1, quad)?);
    quad.add(logvar.sum_cols().scale(-0.5))
}

/// Single-sample estimate of `KL(q(z' | x, z_s) ‖ p(z' | z_s))` per row.
pub fn kl_flow_prior<'g>(
    g: &'g Graph,
    ps: &ParamStore,
    post: &Posterior<'g>,
    eps: &Tensor,
    prior: &FlowStack,
) -> Result<Var<'g>> {
    let cond = (prior.cond_dim() > 0).then_some(post.zs);
    let log_p = prior.log_prob(g, ps, post.z, cond)?;
    gaussian_log_q(g, post.logvar, eps)?.sub(log_p)
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut ps = ParamStore::new();
        let h = c.hidden;
        let enc_v = Mlp::new(
            &mut ps,
            "encoder_v/mlp",
            &[c.x_dim, h, h, c.shared_dim + 2 * c.v_prime_dim],
            false,
            rng,
        );
        let dec_v = Mlp::new(
            &mut ps,
            "decoder_v/mlp",
            &[c.shared_dim + c.v_prime_dim, h, h, c.x_dim],
            false,
            rng,
        );
        let enc_t_embed = Embedding::new(&mut ps, "encoder_t/embed", c.vocab, c.embed_dim, rng);
        let enc_t = Mlp::new(
            &mut ps,
            "encoder_t/mlp",
            &[c.embed_dim, h, h, c.shared_dim + 2 * c.t_prime_dim],
            false,
            rng,
        );
        let latent_t = c.shared_dim + c.t_prime_dim;
        let dec_t = TextDecoder {
            embed: Embedding::new(&mut ps, "decoder_t/embed", c.vocab + 1, c.embed_dim, rng),
            init: Linear::new(&mut ps, "decoder_t/init", latent_t, h, rng),
            cell: GruCell::new(&mut ps, "decoder_t/gru", c.embed_dim + latent_t, h, rng),
            out: Linear::new(&mut ps, "decoder_t/out", h, c.vocab, rng),
        };
        let prior = |p: &PriorConfig, dim, recipe| StackSpec {
            dim,
            cond_dim: c.shared_dim,
            blocks: p.blocks,
            recipe,
            hidden: p.hidden,
            hidden_layers: p.hidden_layers,
            clamp: p.clamp,
        };
        let prior_v = FlowStack::build(
            &mut ps,
            "prior_v",
            &prior(&c.prior_v, c.v_prime_dim, BlockRecipe::CouplingSwitch),
            rng,
        )?;
        let prior_t = FlowStack::build(
            &mut ps,
            "prior_t",
            &prior(&c.prior_t, c.t_prime_dim, BlockRecipe::Glow),
            rng,
        )?;
        let bridge = Bridge::new(&mut ps, "bridge", c.shared_dim, &c.bridge, rng)?;
        Ok(Self {
            config,
            params: ps,
            enc_v,
            dec_v,
            enc_t_embed,
            enc_t,
            dec_t,
            prior_v,
            prior_t,
            bridge,
        })
    }

    pub fn set_training(&mut self, training: bool) {
        self.prior_v.set_training(training);
        self.prior_t.set_training(training);
        self.bridge.stack.set_training(training);
    }

    pub fn needs_init(&self) -> bool {
        self.prior_v.needs_init() || self.prior_t.needs_init() || self.bridge.stack.needs_init()
    }

    fn split_posterior<'g>(
        &self,
        g: &'g Graph,
        out: Var<'g>,
        prime: usize,
        eps: Option<&Tensor>,
    ) -> Result<Posterior<'g>> {
        let s = self.config.shared_dim;
        let zs = out.slice_cols(0, s)?;
        let mu = out.slice_cols(s, s + prime)?;
        let logvar = out
            .slice_cols(s + prime, s + 2 * prime)?
            .clamp(self.config.logvar_min, self.config.logvar_max);
        let z = match eps {
            Some(e) => {
                if e.shape() != mu.shape() {
                    return Err(Error::Shape {
                        op: "reparameterize",
                        lhs: mu.shape(),
                        rhs: e.shape(),
                    });
                }
                logvar.scale(0.5).exp().mul(g.constant(e.clone()))?.add(mu)?
            }
            None => mu,
        };
        Ok(Posterior { zs, mu, logvar, z })
    }

    pub fn encode_v<'g>(&self, g: &'g Graph, x: Var<'g>, eps: Option<&Tensor>) -> Result<Posterior<'g>> {
        if x.cols() != self.config.x_dim {
            return Err(Error::Dim(format!(
                "V input has {} dims, model expects {}",
                x.cols(),
                self.config.x_dim
            )));
        }
        let out = self.enc_v.forward(g, &self.params, x)?;
        self.split_posterior(g, out, self.config.v_prime_dim, eps)
    }

    pub fn check_tokens(&self, seqs: &[Vec<usize>]) -> Result<()> {
        for s in seqs {
            if s.len() != self.config.seq_len {
                return Err(Error::Data(format!(
                    "token sequence of length {} (model uses {})",
                    s.len(),
                    self.config.seq_len
                )));
            }
            if let Some(&t) = s.iter().find(|&&t| t >= self.config.vocab) {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab: self.config.vocab,
                });
            }
        }
        Ok(())
    }

    /// Mean-pooled token embeddings through an MLP.
    pub fn encode_t<'g>(
        &self,
        g: &'g Graph,
        seqs: &[Vec<usize>],
        eps: Option<&Tensor>,
    ) -> Result<Posterior<'g>> {
        if seqs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        self.check_tokens(seqs)?;
        let l = self.config.seq_len;
        let mut pooled: Option<Var<'g>> = None;
        for j in 0..l {
            let col: Vec<usize> = seqs.iter().map(|s| s[j]).collect();
            let e = self.enc_t_embed.forward(g, &self.params, &col)?;
            pooled = Some(match pooled {
                Some(p) => p.add(e)?,
                None => e,
            });
        }
        let pooled = pooled.expect("seq_len > 0").scale(1.0 / l as f64);
        let out = self.enc_t.forward(g, &self.params, pooled)?;
        self.split_posterior(g, out, self.config.t_prime_dim, eps)
    }

    pub fn decode_v<'g>(&self, g: &'g Graph, zs: Var<'g>, z: Var<'g>) -> Result<Var<'g>> {
        let latent = g.concat_cols(&[zs, z])?;
        self.dec_v.forward(g, &self.params, latent)
    }

    fn bos(&self) -> usize {
        self.config.vocab
    }

    fn text_init<'g>(&self, g: &'g Graph, latent: Var<'g>) -> Result<Var<'g>> {
        Ok(self.dec_t.init.forward(g, &self.params, latent)?.tanh())
    }

    fn text_step<'g>(
        &self,
        g: &'g Graph,
        prev: &[usize],
        latent: Var<'g>,
        h: Var<'g>,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let e = self.dec_t.embed.forward(g, &self.params, prev)?;
        let x = g.concat_cols(&[e, latent])?;
        let h = self.dec_t.cell.step(g, &self.params, x, h)?;
        let logits = self.dec_t.out.forward(g, &self.params, h)?;
        Ok((h, logits))
    }

    /// Teacher-forced logits, one `[B, vocab]` node per position.
    pub fn decode_t_logits<'g>(
        &self,
        g: &'g Graph,
        zs: Var<'g>,
        z: Var<'g>,
        targets: &[Vec<usize>],
    ) -> Result<Vec<Var<'g>>> {
        self.check_tokens(targets)?;
        let latent = g.concat_cols(&[zs, z])?;
        let mut h = self.text_init(g, latent)?;
        let mut prev = vec![self.bos(); targets.len()];
        let mut out = Vec::with_capacity(self.config.seq_len);
        for j in 0..self.config.seq_len {
            let (h2, logits) = self.text_step(g, &prev, latent, h)?;
            out.push(logits);
            h = h2;
            prev = targets.iter().map(|t| t[j]).collect();
        }
        Ok(out)
    }

    pub fn recon_v<'g>(&self, g: &'g Graph, x: Var<'g>, post: &Posterior<'g>) -> Result<Var<'g>> {
        let x_hat = self.decode_v(g, post.zs, post.z)?;
        recon_loss_v(x, x_hat, self.config.v_norm)
    }

    pub fn recon_t<'g>(&self, g: &'g Graph, seqs: &[Vec<usize>], post: &Posterior<'g>) -> Result<Var<'g>> {
        let logits = self.decode_t_logits(g, post.zs, post.z, seqs)?;
        sequence_nll(&logits, seqs)
    }

    pub fn kl_v<'g>(&self, g: &'g Graph, post: &Posterior<'g>, eps: &Tensor) -> Result<Var<'g>> {
        kl_flow_prior(g, &self.params, post, eps, &self.prior_v)
    }

    pub fn kl_t<'g>(&self, g: &'g Graph, post: &Posterior<'g>, eps: &Tensor) -> Result<Var<'g>> {
        kl_flow_prior(g, &self.params, post, eps, &self.prior_t)
    }

    pub fn partition_v(&self, x: &Tensor) -> Result<LatentPartition> {
        let g = Graph::no_grad();
        let p = self.encode_v(&g, g.constant(x.clone()), None)?;
        Ok(LatentPartition {
            zs: p.zs.value(),
            mu: p.mu.value(),
            logvar: p.logvar.value(),
        })
    }

    pub fn partition_t(&self, seqs: &[Vec<usize>]) -> Result<LatentPartition> {
        let g = Graph::no_grad();
        let p = self.encode_t(&g, seqs, None)?;
        Ok(LatentPartition {
            zs: p.zs.value(),
            mu: p.mu.value(),
            logvar: p.logvar.value(),
        })
    }

    /// Data-dependent actnorm init of the T prior from posterior draws of
    /// `seqs`.
    pub fn init_actnorm(&mut self, seqs: &[Vec<usize>], eps_t: &Tensor) -> Result<()> {
        let (zs, z) = {
            let g = Graph::no_grad();
            let p = self.encode_t(&g, seqs, Some(eps_t))?;
            (p.zs.value(), p.z.value())
        };
        self.prior_t.initialize(&mut self.params, &z, Some(&zs))
    }

    /// Actnorm flags for every stack, in a fixed order.
    pub fn actnorm_flags(&self) -> Vec<bool> {
        let mut f = self.prior_v.initialized_flags();
        f.extend(self.prior_t.initialized_flags());
        f.extend(self.bridge.stack.initialized_flags());
        f
    }

    pub fn restore_actnorm_flags(&mut self, flags: &[bool]) -> Result<()> {
        let nv = self.prior_v.initialized_flags().len();
        let nt = self.prior_t.initialized_flags().len();
        let nb = self.bridge.stack.initialized_flags().len();
        if flags.len() != nv + nt + nb {
            return Err(Error::Checkpoint(format!(
                "{} actnorm flags, model has {}",
                flags.len(),
                nv + nt + nb
            )));
        }
        self.prior_v.restore_flags(&flags[..nv])?;
        self.prior_t.restore_flags(&flags[nv..nv + nt])?;
        self.bridge.stack.restore_flags(&flags[nv + nt..])
    }
}
