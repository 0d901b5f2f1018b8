//! Invertible map between the two domains' shared latent slices.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::flows::{BlockRecipe, FlowStack, StackSpec};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BridgeConfig {
    pub blocks: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub clamp: f64,
    /// Also penalize `f⁻¹(zs_t)` against `zs_v`.
    pub symmetric: bool,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            blocks: 6,
            hidden: 64,
            hidden_layers: 2,
            clamp: 3.0,
            symmetric: true,
        }
    }
}

/// `f: zs_v ↦ zs_t`, an unconditional coupling flow. The V→T direction is the
/// stack's generative direction.
#[derive(Clone, Debug)]
pub struct Bridge {
    pub stack: FlowStack,
    symmetric: bool,
}

impl Bridge {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        config: &BridgeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let spec = StackSpec {
            dim,
            cond_dim: 0,
            blocks: config.blocks,
            recipe: BlockRecipe::CouplingSwitch,
            hidden: config.hidden,
            hidden_layers: config.hidden_layers,
            clamp: config.clamp,
        };
        Ok(Self {
            stack: FlowStack::build(store, name, &spec, rng)?,
            symmetric: config.symmetric,
        })
    }

    pub fn dim(&self) -> usize {
        self.stack.dim()
    }

    pub fn symmetric(&self) -> bool {
        self.symmetric
    }

    fn check(&self, v: Var<'_>) -> Result<()> {
        if v.cols() != self.dim() {
            return Err(Error::Dim(format!(
                "bridge input has {} dims, expected {}",
                v.cols(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Returns the mapped slice and `log|det ∂f/∂zs_v|` per row.
    pub fn map_v_to_t<'g>(
        &self,
        g: &'g Graph,
        ps: &ParamStore,
        zs_v: Var<'g>,
    ) -> Result<(Var<'g>, Var<'g>)> {
        self.check(zs_v)?;
        self.stack.forward(g, ps, zs_v, None)
    }

    pub fn map_t_to_v<'g>(
        &self,
        g: &'g Graph,
        ps: &ParamStore,
        zs_t: Var<'g>,
    ) -> Result<(Var<'g>, Var<'g>)> {
        self.check(zs_t)?;
        self.stack.inverse(g, ps, zs_t, None)
    }

    pub fn v_to_t(&self, ps: &ParamStore, zs_v: &Tensor) -> Result<Tensor> {
        let g = Graph::no_grad();
        Ok(self.map_v_to_t(&g, ps, g.constant(zs_v.clone()))?.0.value())
    }

    pub fn t_to_v(&self, ps: &ParamStore, zs_t: &Tensor) -> Result<Tensor> {
        let g = Graph::no_grad();
        Ok(self.map_t_to_v(&g, ps, g.constant(zs_t.clone()))?.0.value())
    }

    /// Per-row alignment cost `[B, 1]`:
    /// `mean_d (f(zs_v) - zs_t)² - β · logdet / d'`, plus
    /// `mean_d (f⁻¹(zs_t) - zs_v)²` when symmetric.
    pub fn alignment_loss<'g>(
        &self,
        g: &'g Graph,
        ps: &ParamStore,
        zs_v: Var<'g>,
        zs_t: Var<'g>,
        beta: f64,
    ) -> Result<Var<'g>> {
        let (fv, logdet) = self.map_v_to_t(g, ps, zs_v)?;
        let mut loss = fv.sub(zs_t)?.square().mean_cols();
        if beta != 0.0 {
            loss = loss.sub(logdet.scale(beta / self.dim() as f64))?;
        }
        if self.symmetric {
            let (bt, _) = self.map_t_to_v(g, ps, zs_t)?;
            loss = loss.add(bt.sub(zs_v)?.square().mean_cols())?;
        }
        Ok(loss)
    }

    /// Mean over rows of `‖f(zs_v) - zs_t‖² / d'`.
    pub fn alignment_mse(&self, ps: &ParamStore, zs_v: &Tensor, zs_t: &Tensor) -> Result<f64> {
        let mapped = self.v_to_t(ps, zs_v)?;
        let mut diff = mapped;
        let mut neg = zs_t.clone();
        neg.scale_assign(-1.0);
        diff.add_assign(&neg);
        Ok(diff.sq_norm() / diff.len().max(1) as f64)
    }
}
