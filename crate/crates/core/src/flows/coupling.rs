use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::params::ParamStore;

/// Conditional affine coupling.
///
/// Pass-through dims `x1` are copied; the rest become
/// `y2 = x2 ⊙ exp(s) + t` with `(s, t)` computed from `[x1 ; c]`. The raw
/// log-scale is soft-clamped to `clamp · tanh(s_raw / clamp)`.
#[derive(Clone, Debug)]
pub struct CouplingLayer {
    dim: usize,
    cond_dim: usize,
    pass_idx: Vec<usize>,
    trans_idx: Vec<usize>,
    /// Permutation taking `[x1 ; y2]` back to the original dim order.
    merge_idx: Vec<usize>,
    pub scale_net: Mlp,
    pub shift_net: Mlp,
    clamp: f64,
}

/// First `dim / 2` dims pass through.
pub fn half_mask(dim: usize) -> Vec<bool> {
    (0..dim).map(|i| i < dim / 2).collect()
}

impl CouplingLayer {
    /// `mask[i] == true` marks a pass-through dim. Both sets must be
    /// nonempty. Nets get `hidden_layers` tanh layers of width `hidden` and a
    /// zero-initialized output layer, so a fresh layer is the identity.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        mask: &[bool],
        cond_dim: usize,
        hidden: usize,
        hidden_layers: usize,
        clamp: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let pass_idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let trans_idx: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
        if pass_idx.is_empty() || trans_idx.is_empty() {
            return Err(Error::Config(format!(
                "coupling mask must split {} dims into two nonempty sets",
                mask.len()
            )));
        }
        let mut merge_idx = vec![0; mask.len()];
        for (k, &i) in pass_idx.iter().chain(&trans_idx).enumerate() {
            merge_idx[i] = k;
        }
        let mut dims = vec![pass_idx.len() + cond_dim];
        dims.extend(std::iter::repeat_n(hidden, hidden_layers));
        dims.push(trans_idx.len());
        Ok(Self {
            dim: mask.len(),
            cond_dim,
            scale_net: Mlp::new(store, &format!("{name}/scale"), &dims, true, rng),
            shift_net: Mlp::new(store, &format!("{name}/shift"), &dims, true, rng),
            pass_idx,
            trans_idx,
            merge_idx,
            clamp,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn clamp(&self) -> f64 {
        self.clamp
    }

    fn scale_shift<'g>(
        &self,
        g: &'g Graph,
        ps: &ParamStore,
        x1: Var<'g>,
        c: Option<Var<'g>>,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let input = match c {
            Some(c) if self.cond_dim > 0 => g.concat_cols(&[x1, c])?,
            _ => x1,
        };
        let raw = self.scale_net.forward(g, ps, input)?;
        let s = raw.scale(1.0 / self.clamp).tanh().scale(self.clamp);
        let t = self.shift_net.forward(g, ps, input)?;
        Ok((s, t))
    }

    fn split<'g>(&self, x: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        Ok((x.gather_cols(&self.pass_idx)?, x.gather_cols(&self.trans_idx)?))
    }

    fn merge<'g>(&self, g: &'g Graph, a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
        g.concat_cols(&[a, b])?.gather_cols(&self.merge_idx)
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        ps: &ParamStore,
        x: Var<'g>,
        c: Option<Var<'g>>,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let (x1, x2) = self.split(x)?;
        let (s, t) = self.scale_shift(g, ps, x1, c)?;
        let y2 = x2.mul(s.exp())?.add(t)?;
        Ok((self.merge(g, x1, y2)?, s.sum_cols()))
    }

    pub fn inverse<'g>(
        &self,
        g: &'g Graph,
        ps: &ParamStore,
        y: Var<'g>,
        c: Option<Var<'g>>,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let (y1, y2) = self.split(y)?;
        let (s, t) = self.scale_shift(g, ps, y1, c)?;
        let x2 = y2.sub(t)?.mul(s.neg().exp())?;
        Ok((self.merge(g, y1, x2)?, s.sum_cols().neg()))
    }
}
