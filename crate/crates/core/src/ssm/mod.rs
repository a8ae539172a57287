//! Ground-truth simulators, datasets and their on-disk form.

mod io;
mod lgssm;
mod tracking;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{read_dataset, write_dataset, DatasetMeta};
pub use lgssm::{lgssm_params, lgssm_rollout, lgssm_simulate, stationary_covariance, LgssmParams};
pub use tracking::{
    default_initial_velocity, sample_mixture_noise, tracking_measurement, tracking_simulate,
    tracking_transition_matrix, turn_rate, TrackingParams,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Pretrain,
    Online,
}

/// Which simulator generates the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ModelKind {
    Lgssm { dim: usize },
    Tracking,
}

impl ModelKind {
    pub fn state_dim(self) -> usize {
        match self {
            ModelKind::Lgssm { dim } => dim,
            ModelKind::Tracking => 5,
        }
    }

    pub fn obs_dim(self) -> usize {
        match self {
            ModelKind::Lgssm { dim } => dim,
            ModelKind::Tracking => 2,
        }
    }
}

/// Latent states `x_0..x_T` and observations `y_1..y_T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub observations: Vec<Vec<f64>>,
    /// Master seed of the generating stream.
    pub seed: u64,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.observations.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.states.len() != self.observations.len() + 1 {
            return Err(Error::invalid(format!(
                "{} states for {} observations",
                self.states.len(),
                self.observations.len()
            )));
        }
        if self.states.iter().chain(&self.observations).flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("trajectory holds non-finite values"));
        }
        Ok(())
    }
}

/// Independent generator for trajectory `index` under `seed`: the same ChaCha
/// key with one stream per trajectory.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn simulate(kind: ModelKind, phase: Phase, steps: usize, rng: &mut ChaCha8Rng) -> Result<Trajectory> {
    match kind {
        ModelKind::Lgssm { dim } => lgssm_simulate(&lgssm_params(phase, dim)?, steps, rng),
        ModelKind::Tracking => tracking_simulate(
            &TrackingParams::new(phase),
            steps,
            rng,
            [0.0, 0.0],
            default_initial_velocity(),
        ),
    }
}

/// `n_traj` trajectories of `steps` transitions, each from its own stream.
pub fn generate_dataset(
    kind: ModelKind,
    phase: Phase,
    n_traj: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if n_traj < 1 {
        return Err(Error::invalid("dataset needs at least one trajectory"));
    }
    (0..n_traj)
        .map(|i| {
            let mut rng = trajectory_rng(seed, i as u64);
            let mut t = simulate(kind, phase, steps, &mut rng)?;
            t.seed = seed;
            Ok(t)
        })
        .collect()
}

/// Per-dimension affine standardisation of states and observations, fitted
/// on offline data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub state_mean: Vec<f64>,
    pub state_scale: Vec<f64>,
    pub obs_mean: Vec<f64>,
    pub obs_scale: Vec<f64>,
}

fn mean_scale<'a>(rows: impl Iterator<Item = &'a Vec<f64>> + Clone, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut n = 0.0;
    let mut s = vec![0.0; dim];
    for r in rows.clone() {
        n += 1.0;
        for (a, v) in s.iter_mut().zip(r) {
            *a += v;
        }
    }
    let mean: Vec<f64> = s.iter().map(|v| v / n).collect();
    let mut ss = vec![0.0; dim];
    for r in rows {
        for ((a, v), m) in ss.iter_mut().zip(r).zip(&mean) {
            *a += (v - m) * (v - m);
        }
    }
    let scale = ss
        .iter()
        .map(|v| {
            let sd = (v / n).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

impl Standardizer {
    pub fn identity(state_dim: usize, obs_dim: usize) -> Self {
        Standardizer {
            state_mean: vec![0.0; state_dim],
            state_scale: vec![1.0; state_dim],
            obs_mean: vec![0.0; obs_dim],
            obs_scale: vec![1.0; obs_dim],
        }
    }

    pub fn fit(data: &[Trajectory]) -> Result<Self> {
        let first = data.first().ok_or_else(|| Error::invalid("empty dataset"))?;
        let (dx, dy) = (first.states[0].len(), first.observations.first().map_or(0, Vec::len));
        let (state_mean, state_scale) = mean_scale(data.iter().flat_map(|t| &t.states), dx);
        let (obs_mean, obs_scale) = mean_scale(data.iter().flat_map(|t| &t.observations), dy);
        Ok(Standardizer {
            state_mean,
            state_scale,
            obs_mean,
            obs_scale,
        })
    }

    pub fn state(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.state_mean)
            .zip(&self.state_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn unstate(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.state_mean)
            .zip(&self.state_scale)
            .map(|((v, m), s)| v * s + m)
            .collect()
    }

    pub fn obs(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(&self.obs_mean)
            .zip(&self.obs_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn trajectory(&self, t: &Trajectory) -> Trajectory {
        Trajectory {
            states: t.states.iter().map(|x| self.state(x)).collect(),
            observations: t.observations.iter().map(|y| self.obs(y)).collect(),
            seed: t.seed,
        }
    }
}

/// Per-dimension `(min, max)` of every state in `data`.
pub fn state_bounds(data: &[Trajectory]) -> Vec<(f64, f64)> {
    let dim = data.first().map_or(0, |t| t.states[0].len());
    let mut b = vec![(f64::INFINITY, f64::NEG_INFINITY); dim];
    for x in data.iter().flat_map(|t| &t.states) {
        for (bb, &v) in b.iter_mut().zip(x) {
            bb.0 = bb.0.min(v);
            bb.1 = bb.1.max(v);
        }
    }
    b
}
