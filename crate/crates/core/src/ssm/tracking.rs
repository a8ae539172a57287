use nalgebra::{Matrix4, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Phase, Trajectory};
use crate::error::{Error, Result};

/// Coordinated-turn target with range/bearing-style observations and a
/// Gaussian-mixture measurement noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingParams {
    /// `T_s`, seconds.
    pub sampling_period: f64,
    /// Maneuvering acceleration `a`, m/s².
    pub accel: f64,
    /// Variance of each component of `u_t`.
    pub process_var: f64,
    /// Variance of the turn-rate noise `u_ω`.
    pub turn_var: f64,
    pub p0: f64,
    pub beta: f64,
    pub reference: [f64; 2],
    /// `(weight, variance)` per isotropic zero-mean component.
    pub mixture: Vec<(f64, f64)>,
}

impl TrackingParams {
    pub fn new(phase: Phase) -> Self {
        TrackingParams {
            sampling_period: 5.0,
            accel: match phase {
                Phase::Pretrain => 5.0,
                Phase::Online => -5.0,
            },
            process_var: 1e-2,
            turn_var: 1e-4,
            p0: 1.0,
            beta: 2.0,
            reference: [2.0, 2.0],
            mixture: vec![(0.7, 4.0), (0.3, 25.0)],
        }
    }

    /// Per-axis variance of the mixture noise.
    pub fn noise_variance(&self) -> f64 {
        self.mixture.iter().map(|(w, v)| w * v).sum()
    }
}

/// Coordinated-turn matrix over `(x₁, x₂, ẋ₁, ẋ₂)`. For `|ω| < 1e-8` the
/// constant-velocity limit is used.
pub fn tracking_transition_matrix(omega: f64, ts: f64) -> Matrix4<f64> {
    let (sin_term, cos_term, c, s) = if omega.abs() < 1e-8 {
        (ts, 0.0, 1.0, 0.0)
    } else {
        let wt = omega * ts;
        (wt.sin() / omega, (1.0 - wt.cos()) / omega, wt.cos(), wt.sin())
    };
    Matrix4::new(
        1.0, 0.0, sin_term, -cos_term, //
        0.0, 1.0, -cos_term, sin_term, //
        0.0, 0.0, c, -s, //
        0.0, 0.0, s, c,
    )
}

/// `ω = a / ‖v‖`; errors when the speed is below 1e-6.
pub fn turn_rate(accel: f64, velocity: [f64; 2], step: usize) -> Result<f64> {
    let speed = velocity[0].hypot(velocity[1]);
    if speed < 1e-6 {
        return Err(Error::UndefinedTurnRate { step, speed });
    }
    Ok(accel / speed)
}

/// Noise-free observation `(10·log₁₀(P₀ / ‖r − p‖^β), atan2(p₂ − r₂, p₁ − r₁))`.
/// The bearing lies in `(−π, π]`.
pub fn tracking_measurement(state: &[f64], params: &TrackingParams) -> [f64; 2] {
    let dx = state[0] - params.reference[0];
    let dy = state[1] - params.reference[1];
    let range = dx.hypot(dy);
    let power = 10.0 * (params.p0 / range.powf(params.beta)).log10();
    let mut bearing = dy.atan2(dx);
    if bearing == -std::f64::consts::PI {
        bearing = std::f64::consts::PI;
    }
    [power, bearing]
}

/// Draws one measurement-noise vector from the isotropic mixture.
pub fn sample_mixture_noise<R: Rng + ?Sized>(params: &TrackingParams, rng: &mut R) -> [f64; 2] {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut var = params.mixture.last().map_or(1.0, |m| m.1);
    for &(w, v) in &params.mixture {
        acc += w;
        if u < acc {
            var = v;
            break;
        }
    }
    let sd = var.sqrt();
    [sd * rng.sample::<f64, _>(StandardNormal), sd * rng.sample::<f64, _>(StandardNormal)]
}

/// Simulates `steps` transitions. States are `(x₁, x₂, ẋ₁, ẋ₂, ω)`; the
/// initial turn rate is `a / ‖v₀‖` without noise.
pub fn tracking_simulate<R: Rng + ?Sized>(
    params: &TrackingParams,
    steps: usize,
    rng: &mut R,
    init_pos: [f64; 2],
    init_vel: [f64; 2],
) -> Result<Trajectory> {
    if steps < 1 {
        return Err(Error::invalid("trajectory needs at least one step"));
    }
    let ts = params.sampling_period;
    let process_sd = params.process_var.sqrt();
    let turn_sd = params.turn_var.sqrt();
    let mut kin = Vector4::new(init_pos[0], init_pos[1], init_vel[0], init_vel[1]);
    let mut omega = turn_rate(params.accel, init_vel, 0)?;
    let mut states = vec![vec![kin[0], kin[1], kin[2], kin[3], omega]];
    let mut observations = Vec::with_capacity(steps);
    for t in 1..=steps {
        let u: [f64; 2] = [
            process_sd * rng.sample::<f64, _>(StandardNormal),
            process_sd * rng.sample::<f64, _>(StandardNormal),
        ];
        let next_omega = turn_rate(params.accel, [kin[2], kin[3]], t)?
            + turn_sd * rng.sample::<f64, _>(StandardNormal);
        let bu = Vector4::new(0.5 * ts * ts * u[0], 0.5 * ts * ts * u[1], ts * u[0], ts * u[1]);
        kin = tracking_transition_matrix(omega, ts) * kin + bu;
        omega = next_omega;
        let state = vec![kin[0], kin[1], kin[2], kin[3], omega];
        let h = tracking_measurement(&state, params);
        let v = sample_mixture_noise(params, rng);
        observations.push(vec![h[0] + v[0], h[1] + v[1]]);
        states.push(state);
    }
    Ok(Trajectory {
        states,
        observations,
        seed: 0,
    })
}

/// Initial velocity used by both data phases.
pub fn default_initial_velocity() -> [f64; 2] {
    let v = 55.0 / std::f64::consts::SQRT_2;
    [v, v]
}
