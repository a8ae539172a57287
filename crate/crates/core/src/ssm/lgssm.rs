use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Phase, Trajectory};
use crate::error::{Error, Result};

/// `x_t ~ N(θ₁ x_{t−1}, I)`, `y_t ~ N(θ₂ x_t, obs_var·I)`, `x_0 ~ N(0, I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LgssmParams {
    pub theta1: DMatrix<f64>,
    pub theta2: DMatrix<f64>,
    pub obs_var: f64,
}

impl LgssmParams {
    pub fn state_dim(&self) -> usize {
        self.theta1.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.theta2.nrows()
    }

    /// Largest eigenvalue modulus of θ₁.
    pub fn spectral_radius(&self) -> f64 {
        self.theta1
            .complex_eigenvalues()
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max)
    }
}

/// Banded transition `θ₁(i, j) = base^{|i−j|+1}` and diagonal observation
/// matrix: base 0.42 and gain 0.5 for pretraining, base 0.2 and gain 10 online.
pub fn lgssm_params(phase: Phase, d: usize) -> Result<LgssmParams> {
    if d < 1 {
        return Err(Error::invalid("linear Gaussian dimension must be at least 1"));
    }
    if ![2, 5, 10].contains(&d) {
        log::warn!("dimension {d} is outside the studied set {{2, 5, 10}}");
    }
    let (base, gain) = match phase {
        Phase::Pretrain => (0.42_f64, 0.5),
        Phase::Online => (0.2_f64, 10.0),
    };
    let theta1 = DMatrix::from_fn(d, d, |i, j| base.powi(i.abs_diff(j) as i32 + 1));
    let theta2 = DMatrix::from_diagonal_element(d, d, gain);
    Ok(LgssmParams {
        theta1,
        theta2,
        obs_var: 0.1,
    })
}

/// Deterministic roll-out from `x0` given pre-drawn standard-normal state and
/// observation noise, one vector per step.
pub fn lgssm_rollout(
    params: &LgssmParams,
    x0: &[f64],
    state_noise: &[Vec<f64>],
    obs_noise: &[Vec<f64>],
) -> Trajectory {
    let obs_sd = params.obs_var.sqrt();
    let mut x = DVector::from_column_slice(x0);
    let mut states = vec![x0.to_vec()];
    let mut observations = Vec::with_capacity(state_noise.len());
    for (u, v) in state_noise.iter().zip(obs_noise) {
        x = &params.theta1 * &x + DVector::from_column_slice(u);
        let y = &params.theta2 * &x + DVector::from_column_slice(v) * obs_sd;
        states.push(x.as_slice().to_vec());
        observations.push(y.as_slice().to_vec());
    }
    Trajectory {
        states,
        observations,
        seed: 0,
    }
}

pub fn lgssm_simulate<R: Rng + ?Sized>(params: &LgssmParams, steps: usize, rng: &mut R) -> Result<Trajectory> {
    if steps < 1 {
        return Err(Error::invalid("trajectory needs at least one step"));
    }
    let (dx, dy) = (params.state_dim(), params.obs_dim());
    let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
    let x0 = normal(dx);
    let mut state_noise = Vec::with_capacity(steps);
    let mut obs_noise = Vec::with_capacity(steps);
    for _ in 0..steps {
        state_noise.push(normal(dx));
        obs_noise.push(normal(dy));
    }
    Ok(lgssm_rollout(params, &x0, &state_noise, &obs_noise))
}

/// Solves `Σ = A Σ Aᵀ + Q` by fixed-point iteration (A must be stable).
pub fn stationary_covariance(a: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    let mut sigma = q.clone();
    for _ in 0..10_000 {
        let next = a * &sigma * a.transpose() + q;
        let delta = (&next - &sigma).abs().max();
        sigma = next;
        if delta < 1e-15 {
            break;
        }
    }
    sigma
}
