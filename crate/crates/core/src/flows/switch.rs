use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Swaps the blocks `[a ; b]` (split after `split` dims) into `[b ; a]`.
///
/// Volume preserving. It is its own inverse when `2 * split == dim`; for odd
/// dims the inverse swaps back at `dim - split`.
#[derive(Clone, Debug)]
pub struct SwitchLayer {
    dim: usize,
    split: usize,
    fwd_idx: Vec<usize>,
    inv_idx: Vec<usize>,
}

impl SwitchLayer {
    pub fn new(dim: usize, split: usize) -> Self {
        assert!(split <= dim, "switch split {split} beyond dim {dim}");
        let fwd_idx = (split..dim).chain(0..split).collect();
        let inv_idx = (dim - split..dim).chain(0..dim - split).collect();
        Self {
            dim,
            split,
            fwd_idx,
            inv_idx,
        }
    }

    /// Split at `dim / 2`, matching [`super::coupling::half_mask`].
    pub fn halves(dim: usize) -> Self {
        Self::new(dim, dim / 2)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn split(&self) -> usize {
        self.split
    }

    fn zero_logdet<'g>(g: &'g Graph, rows: usize) -> Var<'g> {
        g.constant(Tensor::zeros(rows, 1))
    }

    pub fn forward<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        Ok((x.gather_cols(&self.fwd_idx)?, Self::zero_logdet(g, x.rows())))
    }

    pub fn inverse<'g>(&self, g: &'g Graph, y: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        Ok((y.gather_cols(&self.inv_idx)?, Self::zero_logdet(g, y.rows())))
    }
}
