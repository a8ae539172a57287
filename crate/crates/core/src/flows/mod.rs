//! Normalising-flow building blocks and the three learned model components:
//! transition `T∘g`, proposal `F∘h` and observation `G` with a standard
//! Gaussian base.

mod coupling;
mod models;
mod stack;

#[cfg(test)]
mod tests;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParameterStore};
use crate::error::Result;
use crate::scalar::Scalar;

pub use coupling::{AffineCoupling, ElementwiseAffine};
pub use models::{DynamicModel, FlowDensity, FlowSample, MeasurementModel, ProposalModel};
pub use stack::{FlowConfig, FlowLayer, FlowStack};

/// How new particles are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProposalMode {
    /// Learned conditional-flow proposal `q(x_t | x_{t−1}, y_t; φ)`.
    #[default]
    Learned,
    /// Draw from the transition model itself (`q = p(x_t | x_{t−1}; θ)`).
    Bootstrap,
}

/// Transition, proposal and observation models. Model parameters θ are
/// registered under `theta.`, proposal parameters φ under `phi.`.
#[derive(Clone, Debug)]
pub struct FlowModel {
    pub dynamic: DynamicModel,
    pub proposal: ProposalModel,
    pub measurement: MeasurementModel,
    pub mode: ProposalMode,
}

impl FlowModel {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParameterStore<S>,
        state_dim: usize,
        obs_dim: usize,
        cfg: &FlowConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let dynamic = DynamicModel::new(store, "theta.dyn", state_dim, cfg, rng)?;
        let measurement = MeasurementModel::new(store, "theta.obs", obs_dim, state_dim, cfg, rng)?;
        let proposal = ProposalModel::new(store, "phi.prop", state_dim, obs_dim, cfg, rng)?;
        Ok(FlowModel {
            dynamic,
            proposal,
            measurement,
            mode: cfg.proposal,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.dynamic.dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.measurement.obs_dim()
    }

    pub fn theta_ids(&self) -> Vec<ParamId> {
        let mut ids = self.dynamic.param_ids();
        ids.extend(self.measurement.param_ids());
        ids
    }

    pub fn phi_ids(&self) -> Vec<ParamId> {
        self.proposal.param_ids()
    }
}
