use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Per-dimension affine layer `y = x ⊙ exp(ls) + b` whose scale and bias
/// optionally get a linear shift from the conditioning vector.
///
/// Data-dependent init sets `b` and `ls` from an init batch seen in the
/// normalizing direction, so that `(y - b) ⊙ exp(-ls)` has zero mean and unit
/// variance per dim on that batch.
#[derive(Clone, Debug)]
pub struct ActNormLayer {
    dim: usize,
    cond_dim: usize,
    pub log_scale: ParamId,
    pub bias: ParamId,
    cond_log_scale: Option<ParamId>,
    cond_bias: Option<ParamId>,
    initialized: bool,
}

impl ActNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, cond_dim: usize) -> Self {
        let (cond_log_scale, cond_bias) = if cond_dim > 0 {
            (
                Some(store.add(format!("{name}/cond_log_scale"), Tensor::zeros(cond_dim, dim))),
                Some(store.add(format!("{name}/cond_bias"), Tensor::zeros(cond_dim, dim))),
            )
        } else {
            (None, None)
        };
        Self {
            dim,
            cond_dim,
            log_scale: store.add(format!("{name}/log_scale"), Tensor::zeros(1, dim)),
            bias: store.add(format!("{name}/bias"), Tensor::zeros(1, dim)),
            cond_log_scale,
            cond_bias,
            initialized: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Marks the layer initialized without touching its parameters, e.g.
    /// after restoring them from a checkpoint.
    pub fn mark_initialized(&mut self) {
        self.initialized = true;
    }

    /// Sets bias and log-scale from the batch `y` (rows are samples) so the
    /// normalized output has zero mean and unit variance. Assumes the
    /// conditioning projections are still zero, as they are at construction.
    pub fn initialize(&mut self, store: &mut ParamStore, y: &Tensor) -> Result<()> {
        let n = y.rows() as f64;
        let mut mean = Tensor::zeros(1, self.dim);
        let mut log_std = Tensor::zeros(1, self.dim);
        for j in 0..self.dim {
            let m = (0..y.rows()).map(|r| y.get(r, j)).sum::<f64>() / n;
            let var = (0..y.rows()).map(|r| (y.get(r, j) - m).powi(2)).sum::<f64>() / n;
            mean.set(0, j, m);
            log_std.set(0, j, var.sqrt().max(1e-6).ln());
        }
        store.set(self.bias, mean)?;
        store.set(self.log_scale, log_std)?;
        self.initialized = true;
        Ok(())
    }

    fn scale_bias<'g>(
        &self,
        g: &'g Graph,
        ps: &ParamStore,
        c: Option<Var<'g>>,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let mut ls = g.param(ps, self.log_scale);
        let mut b = g.param(ps, self.bias);
        if let (Some(c), Some(wl), Some(wb)) = (c, self.cond_log_scale, self.cond_bias) {
            ls = c.matmul(g.param(ps, wl))?.add(ls)?;
            b = c.matmul(g.param(ps, wb))?.add(b)?;
        }
        Ok((ls, b))
    }

    fn logdet<'g>(ls: Var<'g>, rows: usize) -> Result<Var<'g>> {
        let per_row = ls.sum_cols();
        if per_row.rows() == rows {
            Ok(per_row)
        } else {
            per_row.expand_rows(rows)
        }
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        ps: &ParamStore,
        x: Var<'g>,
        c: Option<Var<'g>>,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let (ls, b) = self.scale_bias(g, ps, c)?;
        let y = x.mul(ls.exp())?.add(b)?;
        Ok((y, Self::logdet(ls, x.rows())?))
    }

    pub fn inverse<'g>(
        &self,
        g: &'g Graph,
        ps: &ParamStore,
        y: Var<'g>,
        c: Option<Var<'g>>,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let (ls, b) = self.scale_bias(g, ps, c)?;
        let x = y.sub(b)?.mul(ls.neg().exp())?;
        Ok((x, Self::logdet(ls, y.rows())?.neg()))
    }
}
