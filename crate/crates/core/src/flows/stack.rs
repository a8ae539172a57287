use rand::Rng;
use serde::{Deserialize, Serialize};

use super::coupling::{AffineCoupling, ElementwiseAffine};
use super::ProposalMode;
use crate::autodiff::{ParamId, ParameterStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

/// Architecture of every flow in a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    /// Coupling layers per flow.
    pub depth: usize,
    /// Hidden width of the conditioner networks.
    pub hidden: usize,
    /// Bound applied to scale-net outputs (and proposal log-std).
    pub clamp: f64,
    /// Particle proposal used by the filter.
    pub proposal: ProposalMode,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            depth: 2,
            hidden: 32,
            clamp: 5.0,
            proposal: ProposalMode::Learned,
        }
    }
}

#[derive(Clone, Debug)]
pub enum FlowLayer {
    Coupling(AffineCoupling),
    Elementwise(ElementwiseAffine),
}

/// Composition of flow layers, optionally conditioned on a context vector.
#[derive(Clone, Debug)]
pub struct FlowStack {
    dim: usize,
    cond_dim: usize,
    layers: Vec<FlowLayer>,
}

impl FlowStack {
    /// Alternating half masks: layer `k` transforms the first `⌈d/2⌉`
    /// coordinates when `k` is odd and the rest when `k` is even. A
    /// one-dimensional flow without conditioner is a single elementwise affine
    /// layer.
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParameterStore<S>,
        prefix: &str,
        dim: usize,
        cond_dim: usize,
        cfg: &FlowConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(cfg.depth);
        if cfg.depth > 0 && dim == 1 && cond_dim == 0 {
            layers.push(FlowLayer::Elementwise(ElementwiseAffine::new(
                store,
                &format!("{prefix}.affine"),
                1,
            )?));
        } else {
            let split = dim.div_ceil(2);
            for k in 0..cfg.depth {
                let transformed: Vec<usize> = if dim == 1 {
                    vec![0]
                } else if k % 2 == 0 {
                    (split..dim).collect()
                } else {
                    (0..split).collect()
                };
                layers.push(FlowLayer::Coupling(AffineCoupling::new(
                    store,
                    &format!("{prefix}.c{k}"),
                    dim,
                    &transformed,
                    cond_dim,
                    cfg.hidden,
                    cfg.clamp,
                    rng,
                )?));
            }
        }
        Ok(FlowStack {
            dim,
            cond_dim,
            layers,
        })
    }

    /// A stack with no layers: the identity map.
    pub fn identity(dim: usize, cond_dim: usize) -> Self {
        FlowStack {
            dim,
            cond_dim,
            layers: Vec::new(),
        }
    }

    pub fn push(&mut self, layer: FlowLayer) {
        self.layers.push(layer);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn layers(&self) -> &[FlowLayer] {
        &self.layers
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                FlowLayer::Coupling(c) => c.param_ids(),
                FlowLayer::Elementwise(e) => vec![e.log_scale_id(), e.shift_id()],
            })
            .collect()
    }

    fn cond_for(&self, cond: Option<Var>) -> Option<Var> {
        if self.cond_dim == 0 {
            None
        } else {
            cond
        }
    }

    /// Pushes `x` through every layer; returns the output and the summed
    /// log-determinant (`rows×1`).
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParameterStore<S>,
        x: Var,
        cond: Option<Var>,
    ) -> Result<(Var, Var)> {
        let rows = tape.shape(x).0;
        let mut logdet = tape.constant(Tensor::zeros(rows, 1));
        let mut h = x;
        let cond = self.cond_for(cond);
        for layer in &self.layers {
            let (next, ld) = match layer {
                FlowLayer::Coupling(c) => c.forward(tape, store, h, cond)?,
                FlowLayer::Elementwise(e) => e.forward(tape, store, h)?,
            };
            h = next;
            logdet = tape.add(logdet, ld)?;
        }
        Ok((h, logdet))
    }

    /// Inverse map; the log-determinant is that of the inverse.
    pub fn inverse<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParameterStore<S>,
        y: Var,
        cond: Option<Var>,
    ) -> Result<(Var, Var)> {
        let rows = tape.shape(y).0;
        let mut logdet = tape.constant(Tensor::zeros(rows, 1));
        let mut h = y;
        let cond = self.cond_for(cond);
        for layer in self.layers.iter().rev() {
            let (next, ld) = match layer {
                FlowLayer::Coupling(c) => c.inverse(tape, store, h, cond)?,
                FlowLayer::Elementwise(e) => e.inverse(tape, store, h)?,
            };
            h = next;
            logdet = tape.add(logdet, ld)?;
        }
        Ok((h, logdet))
    }
}
