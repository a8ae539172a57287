//! Exact references used by tests and evaluation: a Kalman filter for the
//! linear Gaussian model and central finite differences over a parameter store.

use nalgebra::{DMatrix, DVector};

use crate::autodiff::ParameterStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::ssm::LgssmParams;

#[derive(Clone, Debug)]
pub struct KalmanResult {
    /// Filtering means for `t = 1..T`.
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    /// `log p(y_{1:T})`.
    pub log_evidence: f64,
    /// Per-step `log p(y_t | y_{1:t−1})`.
    pub increments: Vec<f64>,
}

/// Filters `observations` from the prior `x_0 ~ N(0, I)` with unit transition
/// noise and `obs_var·I` observation noise. Covariances use the Joseph update
/// and are symmetrised each step.
pub fn kalman_filter(params: &LgssmParams, observations: &[Vec<f64>]) -> Result<KalmanResult> {
    let (dx, dy) = (params.state_dim(), params.obs_dim());
    let a = &params.theta1;
    let h = &params.theta2;
    let q = DMatrix::<f64>::identity(dx, dx);
    let r = DMatrix::<f64>::identity(dy, dy) * params.obs_var;
    let eye = DMatrix::<f64>::identity(dx, dx);
    let mut m = DVector::<f64>::zeros(dx);
    let mut p = DMatrix::<f64>::identity(dx, dx);
    let mut out = KalmanResult {
        means: Vec::with_capacity(observations.len()),
        covariances: Vec::with_capacity(observations.len()),
        log_evidence: 0.0,
        increments: Vec::with_capacity(observations.len()),
    };
    for (t, y) in observations.iter().enumerate() {
        if y.len() != dy {
            return Err(Error::invalid(format!(
                "observation {t} has {} entries, model expects {dy}",
                y.len()
            )));
        }
        let mp = a * &m;
        let pp = a * &p * a.transpose() + &q;
        let innov = DVector::from_column_slice(y) - h * &mp;
        let s = h * &pp * h.transpose() + &r;
        let s = (&s + s.transpose()) * 0.5;
        let chol = s.clone().cholesky().ok_or(Error::SingularInnovation(t + 1))?;
        let s_inv_innov = chol.solve(&innov);
        let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let inc = -0.5 * (dy as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + innov.dot(&s_inv_innov));
        // K = P Hᵀ S⁻¹, computed as (S⁻¹ H P)ᵀ since S and P are symmetric.
        let k = chol.solve(&(h * &pp)).transpose();
        m = mp + &k * innov;
        let ikh = &eye - &k * h;
        p = &ikh * pp * ikh.transpose() + &k * &r * k.transpose();
        p = (&p + p.transpose()) * 0.5;
        out.log_evidence += inc;
        out.increments.push(inc);
        out.means.push(m.clone());
        out.covariances.push(p.clone());
    }
    Ok(out)
}

/// Central differences of `loss` with respect to every scalar in `store`, in
/// registration order. Values are restored afterwards.
pub fn finite_diff_grad<S: Scalar>(
    mut loss: impl FnMut(&ParameterStore<S>) -> f64,
    store: &mut ParameterStore<S>,
    step: f64,
) -> Vec<f64> {
    let base = store.flatten();
    let mut probe = base.clone();
    let mut grad = Vec::with_capacity(base.len());
    for k in 0..base.len() {
        probe[k] = S::of(base[k].to_f64_lossy() + step);
        store.unflatten(&probe).expect("same length");
        let up = loss(store);
        probe[k] = S::of(base[k].to_f64_lossy() - step);
        store.unflatten(&probe).expect("same length");
        let down = loss(store);
        probe[k] = base[k];
        grad.push((up - down) / (2.0 * step));
    }
    store.unflatten(&base).expect("same length");
    grad
}
