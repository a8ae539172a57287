use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterStore, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for every parameter of one store.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub cfg: AdamConfig,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    steps: u64,
    skipped: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(store: &ParameterStore<S>, cfg: AdamConfig) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| {
                    let (r, c) = store.value(id).shape();
                    Tensor::zeros(r, c)
                })
                .collect()
        };
        AdamState {
            cfg,
            m: zeros(),
            v: zeros(),
            steps: 0,
            skipped: 0,
        }
    }

    /// Updates applied so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Updates skipped because of non-finite gradients.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }
}

/// One bias-corrected Adam update from the gradients in `store`, which are
/// zeroed afterwards. A non-finite gradient skips the update and returns
/// `false`.
pub fn adam_step<S: Scalar>(store: &mut ParameterStore<S>, state: &mut AdamState<S>) -> bool {
    let ids: Vec<_> = store.ids().collect();
    let finite = ids
        .iter()
        .all(|&id| store.grad(id).first_non_finite().is_none());
    if !finite {
        log::warn!("non-finite gradient; optimizer step {} skipped", state.steps + 1);
        state.skipped += 1;
        store.zero_grads();
        return false;
    }
    state.steps += 1;
    let c = state.cfg;
    let t = state.steps as i32;
    let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
    let bc1 = S::of(1.0 - c.beta1.powi(t));
    let bc2 = S::of(1.0 - c.beta2.powi(t));
    let (lr, eps) = (S::of(c.lr), S::of(c.eps));
    for (k, &id) in ids.iter().enumerate() {
        let g = store.grad(id).data().to_vec();
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        let p = store.value_mut(id).data_mut();
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (S::one() - b1) * g[j];
            v[j] = b2 * v[j] + (S::one() - b2) * g[j] * g[j];
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            p[j] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    store.zero_grads();
    true
}
