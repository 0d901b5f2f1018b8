//! Invertible layers and their composition into conditional flows.
//!
//! Every layer's `forward` runs in the generative direction (base sample
//! `ε` towards `z`) and returns the per-row `log|det ∂y/∂x|` as a `[B, 1]`
//! node. `inverse` runs the normalizing direction and returns the negated
//! log-det, so for a stack
//!
//! ```text
//! log p(z | c) = log N(ε; 0, I) + Σ_layers log|det ∂ε/∂z|
//! ```
//!
//! which is exactly what [`FlowStack::log_prob`] computes.

mod actnorm;
mod coupling;
mod linear;
mod switch;

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use actnorm::ActNormLayer;
pub use coupling::{half_mask, CouplingLayer};
pub use linear::{plu_decompose, InvertibleLinear};
pub use switch::SwitchLayer;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub enum FlowLayer {
    Coupling(CouplingLayer),
    ActNorm(ActNormLayer),
    Linear(InvertibleLinear),
    Switch(SwitchLayer),
}

impl FlowLayer {
    pub fn dim(&self) -> usize {
        match self {
            FlowLayer::Coupling(l) => l.dim(),
            FlowLayer::ActNorm(l) => l.dim(),
            FlowLayer::Linear(l) => l.dim(),
            FlowLayer::Switch(l) => l.dim(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            FlowLayer::Coupling(_) => "coupling",
            FlowLayer::ActNorm(_) => "actnorm",
            FlowLayer::Linear(_) => "invertible_linear",
            FlowLayer::Switch(_) => "switch",
        }
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        ps: &ParamStore,
        x: Var<'g>,
        c: Option<Var<'g>>,
    ) -> Result<(Var<'g>, Var<'g>)> {
        match self {
            FlowLayer::Coupling(l) => l.forward(g, ps, x, c),
            FlowLayer::ActNorm(l) => l.forward(g, ps, x, c),
            FlowLayer::Linear(l) => l.forward(g, ps, x),
            FlowLayer::Switch(l) => l.forward(g, x),
        }
    }

    pub fn inverse<'g>(
        &self,
        g: &'g Graph,
        ps: &ParamStore,
        y: Var<'g>,
        c: Option<Var<'g>>,
    ) -> Result<(Var<'g>, Var<'g>)> {
        match self {
            FlowLayer::Coupling(l) => l.inverse(g, ps, y, c),
            FlowLayer::ActNorm(l) => l.inverse(g, ps, y, c),
            FlowLayer::Linear(l) => l.inverse(g, ps, y),
            FlowLayer::Switch(l) => l.inverse(g, y),
        }
    }
}

/// Block layouts, listed in the normalizing direction (`z` towards `ε`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockRecipe {
    /// `coupling → switch`
    CouplingSwitch,
    /// `actnorm → coupling → invertible linear → switch`
    Glow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackSpec {
    pub dim: usize,
    pub cond_dim: usize,
    pub blocks: usize,
    pub recipe: BlockRecipe,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub clamp: f64,
}

/// Ordered invertible layers (generative order) over a standard-normal base.
#[derive(Clone, Debug)]
pub struct FlowStack {
    layers: Vec<FlowLayer>,
    dim: usize,
    cond_dim: usize,
    training: bool,
}

pub fn standard_normal_log_density(x: &[f64]) -> f64 {
    -0.5 * x.iter().map(|v| v * v).sum::<f64>() - 0.5 * x.len() as f64 * (2.0 * PI).ln()
}

impl FlowStack {
    pub fn new(dim: usize, cond_dim: usize) -> Self {
        Self {
            layers: Vec::new(),
            dim,
            cond_dim,
            training: false,
        }
    }

    /// Builds a stack from a block recipe. Blocks are assembled in the
    /// normalizing direction and stored reversed.
    pub fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        spec: &StackSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let mut normalizing = Vec::new();
        let mask = half_mask(spec.dim);
        for b in 0..spec.blocks {
            let prefix = format!("{name}/block{b}");
            if spec.recipe == BlockRecipe::Glow {
                normalizing.push(FlowLayer::ActNorm(ActNormLayer::new(
                    store,
                    &format!("{prefix}/actnorm"),
                    spec.dim,
                    spec.cond_dim,
                )));
            }
            normalizing.push(FlowLayer::Coupling(CouplingLayer::new(
                store,
                &format!("{prefix}/coupling"),
                &mask,
                spec.cond_dim,
                spec.hidden,
                spec.hidden_layers,
                spec.clamp,
                rng,
            )?));
            if spec.recipe == BlockRecipe::Glow {
                normalizing.push(FlowLayer::Linear(InvertibleLinear::new(
                    store,
                    &format!("{prefix}/linear"),
                    spec.dim,
                    rng,
                )));
            }
            // Normalizing direction moves the transformed dims to the front.
            normalizing.push(FlowLayer::Switch(SwitchLayer::new(
                spec.dim,
                spec.dim - spec.dim / 2,
            )));
        }
        let mut stack = Self::new(spec.dim, spec.cond_dim);
        for layer in normalizing.into_iter().rev() {
            stack.push(layer)?;
        }
        Ok(stack)
    }

    pub fn push(&mut self, layer: FlowLayer) -> Result<()> {
        if layer.dim() != self.dim {
            return Err(Error::Dim(format!(
                "{} layer of dim {} pushed onto a stack of dim {}",
                layer.kind(),
                layer.dim(),
                self.dim
            )));
        }
        self.layers.push(layer);
        Ok(())
    }

    pub fn layers(&self) -> &[FlowLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [FlowLayer] {
        &mut self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn needs_init(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, FlowLayer::ActNorm(a) if !a.is_initialized()))
    }

    fn check_inputs(&self, x: Var<'_>, c: Option<Var<'_>>) -> Result<()> {
        if x.cols() != self.dim {
            return Err(Error::Dim(format!(
                "flow input has {} dims, stack expects {}",
                x.cols(),
                self.dim
            )));
        }
        match c {
            Some(c) if c.cols() != self.cond_dim || c.rows() != x.rows() => Err(Error::Dim(format!(
                "conditioning {:?} does not match {} rows x {} dims",
                c.shape(),
                x.rows(),
                self.cond_dim
            ))),
            None if self.cond_dim > 0 => Err(Error::Dim(format!(
                "stack needs a {}-dim conditioning vector",
                self.cond_dim
            ))),
            _ => Ok(()),
        }
    }

    fn check_layer(&self, index: usize, out: Var<'_>) -> Result<()> {
        if let FlowLayer::ActNorm(a) = &self.layers[index] {
            if self.training && !a.is_initialized() {
                return Err(Error::InitRequired { layer: index });
            }
        }
        if !out.all_finite() {
            return Err(Error::NonFiniteFlow { layer: index });
        }
        Ok(())
    }

    fn ensure_ready(&self) -> Result<()> {
        if self.training {
            for (i, l) in self.layers.iter().enumerate() {
                if matches!(l, FlowLayer::ActNorm(a) if !a.is_initialized()) {
                    return Err(Error::InitRequired { layer: i });
                }
            }
        }
        Ok(())
    }

    /// `ε → z`; returns `(z, log|det ∂z/∂ε|)` per row.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        ps: &ParamStore,
        eps: Var<'g>,
        c: Option<Var<'g>>,
    ) -> Result<(Var<'g>, Var<'g>)> {
        self.check_inputs(eps, c)?;
        self.ensure_ready()?;
        let mut h = eps;
        let mut total: Option<Var<'g>> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, ld) = layer.forward(g, ps, h, c)?;
            self.check_layer(i, y)?;
            total = Some(match total {
                Some(t) => t.add(ld)?,
                None => ld,
            });
            h = y;
        }
        let total = total.unwrap_or_else(|| g.constant(Tensor::zeros(eps.rows(), 1)));
        Ok((h, total))
    }

    /// `z → ε`; returns `(ε, log|det ∂ε/∂z|)` per row.
    pub fn inverse<'g>(
        &self,
        g: &'g Graph,
        ps: &ParamStore,
        z: Var<'g>,
        c: Option<Var<'g>>,
    ) -> Result<(Var<'g>, Var<'g>)> {
        self.check_inputs(z, c)?;
        self.ensure_ready()?;
        let mut h = z;
        let mut total: Option<Var<'g>> = None;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (x, ld) = layer.inverse(g, ps, h, c)?;
            self.check_layer(i, x)?;
            total = Some(match total {
                Some(t) => t.add(ld)?,
                None => ld,
            });
            h = x;
        }
        let total = total.unwrap_or_else(|| g.constant(Tensor::zeros(z.rows(), 1)));
        Ok((h, total))
    }

    /// Per-row log density of `z` given `c`, `[B, 1]`.
    pub fn log_prob<'g>(
        &self,
        g: &'g Graph,
        ps: &ParamStore,
        z: Var<'g>,
        c: Option<Var<'g>>,
    ) -> Result<Var<'g>> {
        let (eps, logdet) = self.inverse(g, ps, z, c)?;
        let norm = -0.5 * self.dim as f64 * (2.0 * PI).ln();
        eps.square().sum_cols().scale(-0.5).add_scalar(norm).add(logdet)
    }

    /// Draws `rows` samples; `c` (when present) must have `rows` rows.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        ps: &ParamStore,
        rows: usize,
        c: Option<&Tensor>,
        rng: &mut R,
    ) -> Result<Tensor> {
        let eps = Tensor::randn(rows, self.dim, rng);
        Ok(self.forward_tensor(ps, &eps, c)?.0)
    }

    pub fn forward_tensor(
        &self,
        ps: &ParamStore,
        eps: &Tensor,
        c: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let g = Graph::no_grad();
        let c = c.map(|c| g.constant(c.clone()));
        let (z, ld) = self.forward(&g, ps, g.constant(eps.clone()), c)?;
        Ok((z.value(), ld.value()))
    }

    pub fn inverse_tensor(
        &self,
        ps: &ParamStore,
        z: &Tensor,
        c: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let g = Graph::no_grad();
        let c = c.map(|c| g.constant(c.clone()));
        let (e, ld) = self.inverse(&g, ps, g.constant(z.clone()), c)?;
        Ok((e.value(), ld.value()))
    }

    pub fn log_prob_tensor(&self, ps: &ParamStore, z: &Tensor, c: Option<&Tensor>) -> Result<Tensor> {
        let g = Graph::no_grad();
        let c = c.map(|c| g.constant(c.clone()));
        Ok(self.log_prob(&g, ps, g.constant(z.clone()), c)?.value())
    }

    /// Data-dependent init of every uninitialized actnorm layer, walking the
    /// normalizing direction from the data batch `z`.
    pub fn initialize(&mut self, ps: &mut ParamStore, z: &Tensor, c: Option<&Tensor>) -> Result<()> {
        let mut h = z.clone();
        for i in (0..self.layers.len()).rev() {
            if let FlowLayer::ActNorm(a) = &mut self.layers[i] {
                if !a.is_initialized() {
                    a.initialize(ps, &h)?;
                }
            }
            let g = Graph::no_grad();
            let cv = c.map(|c| g.constant(c.clone()));
            let (x, _) = self.layers[i].inverse(&g, ps, g.constant(h), cv)?;
            h = x.value();
        }
        Ok(())
    }

    /// Names of actnorm layers that have been initialized, for checkpoints.
    pub fn initialized_flags(&self) -> Vec<bool> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                FlowLayer::ActNorm(a) => Some(a.is_initialized()),
                _ => None,
            })
            .collect()
    }

    pub fn restore_flags(&mut self, flags: &[bool]) -> Result<()> {
        let mut it = flags.iter();
        for l in &mut self.layers {
            if let FlowLayer::ActNorm(a) = l {
                match it.next() {
                    Some(true) => a.mark_initialized(),
                    Some(false) => {}
                    None => return Err(Error::Checkpoint("too few actnorm flags".into())),
                }
            }
        }
        if it.next().is_some() {
            return Err(Error::Checkpoint("too many actnorm flags".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
