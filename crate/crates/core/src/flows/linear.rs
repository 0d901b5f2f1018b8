use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Invertible linear map `y = W x` on each row, with `W = P L (U + diag(sign ⊙ exp(log_diag)))`.
///
/// `P` and `sign` are fixed at construction; `L` is unit lower-triangular and
/// `U` strictly upper-triangular (only the masked parts of the stored
/// matrices are used). The diagonal of the upper factor can never be zero.
#[derive(Clone, Debug)]
pub struct InvertibleLinear {
    dim: usize,
    perm: Tensor,
    sign: Tensor,
    lower_mask: Tensor,
    upper_mask: Tensor,
    pub lower: ParamId,
    pub upper: ParamId,
    pub log_diag: ParamId,
}

/// `A = P L U` with partial pivoting; `L` has a unit diagonal.
pub fn plu_decompose(a: &Tensor) -> Option<(Tensor, Tensor, Tensor)> {
    let n = a.rows();
    let mut u = a.clone();
    let mut l = Tensor::identity(n);
    let mut order: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| u.get(i, col).abs().total_cmp(&u.get(j, col).abs()))?;
        if u.get(pivot, col).abs() < 1e-14 {
            return None;
        }
        if pivot != col {
            order.swap(pivot, col);
            for c in 0..n {
                let (x, y) = (u.get(pivot, c), u.get(col, c));
                u.set(pivot, c, y);
                u.set(col, c, x);
            }
            for c in 0..col {
                let (x, y) = (l.get(pivot, c), l.get(col, c));
                l.set(pivot, c, y);
                l.set(col, c, x);
            }
        }
        for r in col + 1..n {
            let f = u.get(r, col) / u.get(col, col);
            l.set(r, col, f);
            for c in col..n {
                u.set(r, c, u.get(r, c) - f * u.get(col, c));
            }
        }
    }
    // Rows of `u` were permuted by `order`: (Q A) = L U, so A = Qᵀ L U.
    let mut p = Tensor::zeros(n, n);
    for (row, &src) in order.iter().enumerate() {
        p.set(src, row, 1.0);
    }
    Some((p, l, u))
}

fn random_orthogonal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Tensor {
    // Gram-Schmidt on a Gaussian matrix; retry on the (measure-zero) degenerate case.
    loop {
        let a = Tensor::randn(dim, dim, rng);
        let mut q: Vec<Vec<f64>> = Vec::with_capacity(dim);
        let mut ok = true;
        for r in 0..dim {
            let mut v = a.row_slice(r).to_vec();
            for b in &q {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-6 {
                ok = false;
                break;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            q.push(v);
        }
        if ok {
            return Tensor::from_rows(&q).expect("square");
        }
    }
}

impl InvertibleLinear {
    /// Starts from a random rotation.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        let w = random_orthogonal(dim, rng);
        Self::from_matrix(store, name, &w).expect("orthogonal matrices are invertible")
    }

    pub fn from_matrix(store: &mut ParamStore, name: &str, w: &Tensor) -> Result<Self> {
        let dim = w.rows();
        if w.cols() != dim {
            return Err(Error::Shape {
                op: "InvertibleLinear::from_matrix",
                lhs: w.shape(),
                rhs: [dim, dim],
            });
        }
        let (p, l, u) =
            plu_decompose(w).ok_or_else(|| Error::Config("singular invertible-linear init".into()))?;
        let mut lower_mask = Tensor::zeros(dim, dim);
        let mut upper_mask = Tensor::zeros(dim, dim);
        let mut sign = Tensor::zeros(1, dim);
        let mut log_diag = Tensor::zeros(1, dim);
        let mut upper = u.clone();
        for i in 0..dim {
            for j in 0..dim {
                if j < i {
                    lower_mask.set(i, j, 1.0);
                } else if j > i {
                    upper_mask.set(i, j, 1.0);
                }
            }
            let d = u.get(i, i);
            sign.set(0, i, d.signum());
            log_diag.set(0, i, d.abs().ln());
            upper.set(i, i, 0.0);
        }
        Ok(Self {
            dim,
            perm: p,
            sign,
            lower_mask,
            upper_mask,
            lower: store.add(format!("{name}/lower"), l),
            upper: store.add(format!("{name}/upper"), upper),
            log_diag: store.add(format!("{name}/log_diag"), log_diag),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weight<'g>(&self, g: &'g Graph, ps: &ParamStore) -> Result<Var<'g>> {
        let eye = g.constant(Tensor::identity(self.dim));
        let l = g
            .param(ps, self.lower)
            .mul(g.constant(self.lower_mask.clone()))?
            .add(eye)?;
        let diag = g
            .param(ps, self.log_diag)
            .exp()
            .mul(g.constant(self.sign.clone()))?
            .expand_rows(self.dim)?
            .mul(eye)?;
        let u = g
            .param(ps, self.upper)
            .mul(g.constant(self.upper_mask.clone()))?
            .add(diag)?;
        g.constant(self.perm.clone()).matmul(l.matmul(u)?)
    }

    fn logdet<'g>(&self, g: &'g Graph, ps: &ParamStore, rows: usize) -> Result<Var<'g>> {
        g.param(ps, self.log_diag).sum().expand_rows(rows)
    }

    pub fn forward<'g>(&self, g: &'g Graph, ps: &ParamStore, x: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let w = self.weight(g, ps)?;
        Ok((x.matmul(w.transpose())?, self.logdet(g, ps, x.rows())?))
    }

    pub fn inverse<'g>(&self, g: &'g Graph, ps: &ParamStore, y: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let w_inv = self.weight(g, ps)?.inverse()?;
        Ok((y.matmul(w_inv.transpose())?, self.logdet(g, ps, y.rows())?.neg()))
    }
}
