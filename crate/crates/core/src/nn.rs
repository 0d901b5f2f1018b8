//! Small network building blocks over the autodiff graph.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// `y = x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// LeCun-normal weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut w = Tensor::randn(in_dim, out_dim, rng);
        w.scale_assign(1.0 / (in_dim.max(1) as f64).sqrt());
        Self {
            weight: store.add(format!("{name}/weight"), w),
            bias: store.add(format!("{name}/bias"), Tensor::zeros(1, out_dim)),
            in_dim,
            out_dim,
        }
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: store.add(format!("{name}/weight"), Tensor::zeros(in_dim, out_dim)),
            bias: store.add(format!("{name}/bias"), Tensor::zeros(1, out_dim)),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, ps: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        x.matmul(g.param(ps, self.weight))?.add(g.param(ps, self.bias))
    }
}

/// Tanh multilayer perceptron; no activation after the last layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`. With `zero_last` the output layer starts
    /// at exactly zero.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        zero_last: bool,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let lname = format!("{name}/layer{i}");
                if zero_last && i == n - 1 {
                    Linear::zeroed(store, &lname, dims[i], dims[i + 1])
                } else {
                    Linear::new(store, &lname, dims[i], dims[i + 1], rng)
                }
            })
            .collect();
        Self { layers }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn forward<'g>(&self, g: &'g Graph, ps: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, ps, h)?;
            if i < last {
                h = h.tanh();
            }
        }
        Ok(h)
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("non-empty MLP")
    }
}

/// Minimal gated recurrent cell:
///
/// ```text
/// r  = σ(x Wxr + h Whr)        u = σ(x Wxu + h Whu)
/// n  = tanh(x Wxn + r ⊙ (h Whn))
/// h' = n + u ⊙ (h − n)
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    input: Linear,
    hidden: Linear,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            input: Linear::new(store, &format!("{name}/input"), in_dim, 3 * hidden_dim, rng),
            hidden: Linear::new(store, &format!("{name}/hidden"), hidden_dim, 3 * hidden_dim, rng),
            hidden_dim,
        }
    }

    pub fn step<'g>(
        &self,
        g: &'g Graph,
        ps: &ParamStore,
        x: Var<'g>,
        h: Var<'g>,
    ) -> Result<Var<'g>> {
        let hd = self.hidden_dim;
        let xi = self.input.forward(g, ps, x)?;
        let hh = self.hidden.forward(g, ps, h)?;
        let gate = |v: Var<'g>, k: usize| v.slice_cols(k * hd, (k + 1) * hd);
        let r = gate(xi, 0)?.add(gate(hh, 0)?)?.sigmoid();
        let u = gate(xi, 1)?.add(gate(hh, 1)?)?.sigmoid();
        let n = gate(xi, 2)?.add(r.mul(gate(hh, 2)?)?)?.tanh();
        n.add(u.mul(h.sub(n)?)?)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            table: store.add(format!("{name}/table"), Tensor::randn(vocab, dim, rng)),
            vocab,
            dim,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, ps: &ParamStore, ids: &[usize]) -> Result<Var<'g>> {
        g.param(ps, self.table).gather_rows(ids)
    }
}
