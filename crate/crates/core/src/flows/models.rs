use rand::Rng;

use super::stack::{FlowConfig, FlowStack};
use crate::autodiff::{Mlp, ParamId, ParameterStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn standard_normal_log_density<S: Scalar>(tape: &mut Tape<S>, z: Var) -> Result<Var> {
    let cols = tape.shape(z).1;
    let zero = tape.constant(Tensor::zeros(1, cols));
    tape.gaussian_log_density(z, zero, zero)
}

/// Log-density of a sample pushed through a flow, split into the base density
/// and the forward log-determinant, so `log_density = base − logdet`.
#[derive(Clone, Copy, Debug)]
pub struct FlowDensity {
    pub log_density: Var,
    pub base: Var,
    pub logdet: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct FlowSample {
    pub value: Var,
    /// Point in the base space before the flow.
    pub base_point: Var,
    pub density: FlowDensity,
}

/// Transition density `p(x_t | x_{t−1})`: a diagonal Gaussian base
/// `g = N(x_{t−1}·M + b, diag(exp(log_var)))` pushed through an unconditioned
/// flow.
#[derive(Clone, Debug)]
pub struct DynamicModel {
    dim: usize,
    /// Mean map applied as `x_{t−1}·M`, i.e. `M` is the transposed transition
    /// matrix.
    transition: ParamId,
    bias: ParamId,
    log_var: ParamId,
    flow: FlowStack,
}

impl DynamicModel {
    /// Mean map starts at the identity, log-variance at zero.
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParameterStore<S>,
        prefix: &str,
        dim: usize,
        cfg: &FlowConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let transition = store.add(format!("{prefix}.transition"), Tensor::identity(dim))?;
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(1, dim))?;
        let log_var = store.add(format!("{prefix}.log_var"), Tensor::zeros(1, dim))?;
        let flow = FlowStack::new(store, &format!("{prefix}.flow"), dim, 0, cfg, rng)?;
        Ok(DynamicModel {
            dim,
            transition,
            bias,
            log_var,
            flow,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn flow(&self) -> &FlowStack {
        &self.flow
    }

    pub fn flow_mut(&mut self) -> &mut FlowStack {
        &mut self.flow
    }

    pub fn transition_id(&self) -> ParamId {
        self.transition
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }

    pub fn log_var_id(&self) -> ParamId {
        self.log_var
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.transition, self.bias, self.log_var];
        ids.extend(self.flow.param_ids());
        ids
    }

    fn base<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParameterStore<S>,
        x_prev: Var,
    ) -> Result<(Var, Var)> {
        let m = tape.param(store, self.transition);
        let b = tape.param(store, self.bias);
        let mean = tape.linear(x_prev, m, b)?;
        let lv = tape.param(store, self.log_var);
        let log_std = tape.scale(lv, S::of(0.5));
        Ok((mean, log_std))
    }

    /// Reparameterised draw `x_t = T(mean + std ⊙ noise)` with its log-density.
    pub fn sample<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParameterStore<S>,
        x_prev: Var,
        noise: Var,
    ) -> Result<FlowSample> {
        let (mean, log_std) = self.base(tape, store, x_prev)?;
        let std = tape.exp(log_std);
        let spread = tape.mul(noise, std)?;
        let base_point = tape.add(mean, spread)?;
        let base = tape.gaussian_log_density(base_point, mean, log_std)?;
        let (value, logdet) = self.flow.forward(tape, store, base_point, None)?;
        let log_density = tape.sub(base, logdet)?;
        Ok(FlowSample {
            value,
            base_point,
            density: FlowDensity {
                log_density,
                base,
                logdet,
            },
        })
    }

    /// `log p(x_t | x_{t−1})` by the change of variables through `T⁻¹`.
    pub fn log_density<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParameterStore<S>,
        x_t: Var,
        x_prev: Var,
    ) -> Result<FlowDensity> {
        let (base_point, inv_logdet) = self.flow.inverse(tape, store, x_t, None)?;
        let (mean, log_std) = self.base(tape, store, x_prev)?;
        let base = tape.gaussian_log_density(base_point, mean, log_std)?;
        let log_density = tape.add(base, inv_logdet)?;
        let logdet = tape.neg(inv_logdet);
        Ok(FlowDensity {
            log_density,
            base,
            logdet,
        })
    }
}

/// Proposal `q(x_t | x_{t−1}, y_t)`: a Gaussian base whose mean and log-std
/// come from one network over `(x_{t−1}, y_t)`, pushed through a flow
/// conditioned on `y_t`.
#[derive(Clone, Debug)]
pub struct ProposalModel {
    state_dim: usize,
    obs_dim: usize,
    base_net: Mlp,
    flow: FlowStack,
    clamp: f64,
}

impl ProposalModel {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParameterStore<S>,
        prefix: &str,
        state_dim: usize,
        obs_dim: usize,
        cfg: &FlowConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let base_net = Mlp::new(
            store,
            &format!("{prefix}.base"),
            &[state_dim + obs_dim, cfg.hidden, 2 * state_dim],
            rng,
        )?;
        let flow = FlowStack::new(store, &format!("{prefix}.flow"), state_dim, obs_dim, cfg, rng)?;
        Ok(ProposalModel {
            state_dim,
            obs_dim,
            base_net,
            flow,
            clamp: cfg.clamp,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn base_net(&self) -> &Mlp {
        &self.base_net
    }

    pub fn flow(&self) -> &FlowStack {
        &self.flow
    }

    pub fn flow_mut(&mut self) -> &mut FlowStack {
        &mut self.flow
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.base_net.param_ids().collect();
        ids.extend(self.flow.param_ids());
        ids
    }

    fn base<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParameterStore<S>,
        x_prev: Var,
        y: Var,
    ) -> Result<(Var, Var)> {
        let input = tape.concat_cols(&[x_prev, y])?;
        let out = self.base_net.forward(tape, store, input)?;
        let d = self.state_dim;
        let mean = tape.select_cols(out, &(0..d).collect::<Vec<_>>())?;
        let raw = tape.select_cols(out, &(d..2 * d).collect::<Vec<_>>())?;
        let c = S::of(self.clamp);
        let log_std = tape.clamp(raw, -c, c);
        Ok((mean, log_std))
    }

    /// Reparameterised draw `x_t = F(mean + std ⊙ noise; y_t)`. `y` holds the
    /// observation repeated once per row of `x_prev`.
    pub fn sample<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParameterStore<S>,
        x_prev: Var,
        y: Var,
        noise: Var,
    ) -> Result<FlowSample> {
        let (mean, log_std) = self.base(tape, store, x_prev, y)?;
        let std = tape.exp(log_std);
        let spread = tape.mul(noise, std)?;
        let base_point = tape.add(mean, spread)?;
        let base = tape.gaussian_log_density(base_point, mean, log_std)?;
        let (value, logdet) = self.flow.forward(tape, store, base_point, Some(y))?;
        let log_density = tape.sub(base, logdet)?;
        Ok(FlowSample {
            value,
            base_point,
            density: FlowDensity {
                log_density,
                base,
                logdet,
            },
        })
    }

    /// `log q(x_t | x_{t−1}, y_t)` through the inverse flow.
    pub fn log_density<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParameterStore<S>,
        x_t: Var,
        x_prev: Var,
        y: Var,
    ) -> Result<FlowDensity> {
        let (base_point, inv_logdet) = self.flow.inverse(tape, store, x_t, Some(y))?;
        let (mean, log_std) = self.base(tape, store, x_prev, y)?;
        let base = tape.gaussian_log_density(base_point, mean, log_std)?;
        let log_density = tape.add(base, inv_logdet)?;
        let logdet = tape.neg(inv_logdet);
        Ok(FlowDensity {
            log_density,
            base,
            logdet,
        })
    }
}

/// Observation model `y_t = G(z_t; x_t)` with `z_t ~ N(0, I)`.
#[derive(Clone, Debug)]
pub struct MeasurementModel {
    obs_dim: usize,
    state_dim: usize,
    flow: FlowStack,
}

impl MeasurementModel {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParameterStore<S>,
        prefix: &str,
        obs_dim: usize,
        state_dim: usize,
        cfg: &FlowConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if state_dim == 0 {
            return Err(Error::invalid("measurement flow needs a state conditioner"));
        }
        let flow = FlowStack::new(store, &format!("{prefix}.flow"), obs_dim, state_dim, cfg, rng)?;
        Ok(MeasurementModel {
            obs_dim,
            state_dim,
            flow,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn flow(&self) -> &FlowStack {
        &self.flow
    }

    pub fn flow_mut(&mut self) -> &mut FlowStack {
        &mut self.flow
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.flow.param_ids()
    }

    /// `log p(y_t | x_t)` with `z = G⁻¹(y; x)`: `base = log p_Z(z)` and
    /// `logdet = log|det J_G(z; x)|`. `y` and `x` share the row count.
    pub fn log_likelihood<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParameterStore<S>,
        y: Var,
        x: Var,
    ) -> Result<FlowDensity> {
        let (z, inv_logdet) = self.flow.inverse(tape, store, y, Some(x))?;
        let base = standard_normal_log_density(tape, z)?;
        let log_density = tape.add(base, inv_logdet)?;
        let logdet = tape.neg(inv_logdet);
        Ok(FlowDensity {
            log_density,
            base,
            logdet,
        })
    }

    /// Generative direction `y = G(z; x)`.
    pub fn sample<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParameterStore<S>,
        x: Var,
        z: Var,
    ) -> Result<Var> {
        Ok(self.flow.forward(tape, store, z, Some(x))?.0)
    }
}
