//! Supervised pretraining and online learning over sliding windows.

mod adam;
mod pretrain;

use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::pf::{
    filter_step, init_particles, standard_normal, FilterConfig, FilterDiagnostics, FilterModel, LiveEnsemble,
    ParticleEnsemble,
};
use crate::scalar::Scalar;
use crate::ssm::{Standardizer, Trajectory};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use pretrain::{pretrain, trajectory_mse, PretrainConfig, PretrainReport};

/// Per-step `(logsumexp(log w_t), logsumexp(log w̃_{t−1}))` pairs of one
/// window, all on the window's tape.
#[derive(Clone, Debug)]
pub struct WindowAccumulator {
    pub window: usize,
    pub len: usize,
    terms: Vec<(Var, Var)>,
}

impl WindowAccumulator {
    pub fn new(window: usize, len: usize) -> Self {
        WindowAccumulator {
            window,
            len,
            terms: Vec::with_capacity(len),
        }
    }

    pub fn push(&mut self, lse_w: Var, lse_prev: Var) {
        self.terms.push((lse_w, lse_prev));
    }

    pub fn terms(&self) -> &[(Var, Var)] {
        &self.terms
    }

    pub fn is_full(&self) -> bool {
        self.terms.len() == self.len
    }

    /// Starts the next window on a fresh tape.
    pub fn advance(&mut self) {
        self.window += 1;
        self.terms.clear();
    }
}

/// `−Σ_t [logsumexp(log w_t) − logsumexp(log w̃_{t−1})]` over a full window.
pub fn window_loss<S: Scalar>(tape: &mut Tape<S>, acc: &WindowAccumulator) -> Result<Var> {
    if !acc.is_full() {
        return Err(Error::IncompleteWindow {
            have: acc.terms.len(),
            need: acc.len,
        });
    }
    let mut total = tape.scalar(S::zero());
    for &(w, prev) in &acc.terms {
        let d = tape.sub(w, prev)?;
        total = tape.add(total, d)?;
    }
    Ok(tape.neg(total))
}

/// Which loss drives the per-window update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OnlineMethod {
    /// Parameters stay at the pretrained values.
    #[serde(rename = "pretrained-dpf", alias = "frozen")]
    Frozen,
    /// Windowed evidence bound on observations only.
    #[serde(rename = "ol-dpf", alias = "unsupervised")]
    Unsupervised,
    /// Windowed MSE against ground-truth states.
    #[serde(rename = "oracle-dpf", alias = "supervised")]
    Supervised,
}

impl OnlineMethod {
    pub const ALL: [OnlineMethod; 3] = [OnlineMethod::Frozen, OnlineMethod::Unsupervised, OnlineMethod::Supervised];

    pub fn label(self) -> &'static str {
        match self {
            OnlineMethod::Frozen => "pretrained-dpf",
            OnlineMethod::Unsupervised => "ol-dpf",
            OnlineMethod::Supervised => "oracle-dpf",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        OnlineMethod::ALL
            .into_iter()
            .find(|m| m.label() == s || format!("{m:?}").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown method `{s}` (pretrained-dpf, ol-dpf, oracle-dpf)")))
    }
}

#[derive(Clone, Debug)]
pub struct OnlineConfig {
    /// Window length `L`.
    pub window: usize,
    pub adam: AdamConfig,
    pub filter: FilterConfig,
    /// Maps between world and model coordinates.
    pub standardizer: Standardizer,
    /// Keep a flat parameter copy every this many windows (0 = never).
    pub snapshot_every: usize,
    /// Write a checkpoint every `n` windows into the directory.
    pub checkpoint: Option<(PathBuf, usize)>,
}

/// Everything recorded along one online run. Estimates are in world
/// coordinates.
#[derive(Clone, Debug, Default)]
pub struct OnlineRunRecord {
    pub estimates: Vec<Vec<f64>>,
    /// `‖x̂_t − x_t‖²` over the full state, when ground truth is known.
    pub squared_errors: Vec<f64>,
    /// Windowed evidence-bound loss of every complete window, whichever method
    /// drives the update.
    pub window_losses: Vec<f64>,
    /// `(window index, flattened parameters)` at window boundaries.
    pub snapshots: Vec<(usize, Vec<f64>)>,
    pub optimizer_steps: u64,
    pub diagnostics: FilterDiagnostics,
}

/// Unsupervised run from observations only.
pub fn online_run<S: Scalar, M: FilterModel<S> + ?Sized, R: Rng + ?Sized>(
    observations: &[Vec<f64>],
    model: &M,
    store: &mut ParameterStore<S>,
    cfg: &OnlineConfig,
    rng: &mut R,
) -> Result<OnlineRunRecord> {
    run_online(OnlineMethod::Unsupervised, observations, None, model, store, cfg, rng)
}

/// Same loop with the windowed MSE against the true states `x_1..x_T`.
pub fn supervised_online_run<S: Scalar, M: FilterModel<S> + ?Sized, R: Rng + ?Sized>(
    trajectory: &Trajectory,
    model: &M,
    store: &mut ParameterStore<S>,
    cfg: &OnlineConfig,
    rng: &mut R,
) -> Result<OnlineRunRecord> {
    run_online(
        OnlineMethod::Supervised,
        &trajectory.observations,
        Some(&trajectory.states[1..]),
        model,
        store,
        cfg,
        rng,
    )
}

/// Runs one method over a trajectory with world-coordinate `truth` for
/// `t = 1..T` (required for the supervised method, used for errors
/// otherwise). The particle draws are identical across methods for a given
/// `rng` state, so a zero learning rate reproduces the frozen filter exactly.
pub fn run_online<S: Scalar, M: FilterModel<S> + ?Sized, R: Rng + ?Sized>(
    method: OnlineMethod,
    observations: &[Vec<f64>],
    truth: Option<&[Vec<f64>]>,
    model: &M,
    store: &mut ParameterStore<S>,
    cfg: &OnlineConfig,
    rng: &mut R,
) -> Result<OnlineRunRecord> {
    cfg.filter.validate()?;
    if cfg.window < 1 {
        return Err(Error::invalid("window length must be at least 1"));
    }
    if let Some(tr) = truth {
        if tr.len() != observations.len() {
            return Err(Error::invalid(format!(
                "{} true states for {} observations",
                tr.len(),
                observations.len()
            )));
        }
    }
    if method == OnlineMethod::Supervised && truth.is_none() {
        return Err(Error::invalid("supervised run needs ground-truth states"));
    }
    let st = &cfg.standardizer;
    let ys: Vec<Vec<S>> = observations.iter().map(|y| st.obs(y).into_iter().map(S::of).collect()).collect();
    let targets: Option<Vec<Tensor<S>>> = truth.map(|tr| {
        tr.iter()
            .map(|x| Tensor::row(&st.state(x).into_iter().map(S::of).collect::<Vec<_>>()))
            .collect()
    });
    let mut adam = AdamState::new(store, cfg.adam);
    let mut rec = OnlineRunRecord {
        estimates: Vec::with_capacity(ys.len()),
        ..Default::default()
    };
    let dx = model.state_dim();
    let mut ens: ParticleEnsemble<S> = init_particles(&cfg.filter, rng)?;
    let mut tape = Tape::new();
    let mut live = ens.attach(&mut tape);
    let mut acc = WindowAccumulator::new(0, cfg.window);
    let mut sq_terms: Vec<Var> = Vec::with_capacity(cfg.window);
    let mut last = (false, Vec::new());
    for (k, y) in ys.iter().enumerate() {
        let t = k + 1;
        let noise = standard_normal(cfg.filter.num_particles, dx, rng);
        let out = match filter_step(&mut tape, store, model, &mut live, y, noise, &cfg.filter, rng, &mut rec.diagnostics) {
            Ok(o) => o,
            Err(e @ (Error::FilterCollapse | Error::NonFiniteWeight { .. } | Error::NonFinite { .. }))
                if !matches!(e, Error::NonFinite { context: "observation", .. }) =>
            {
                // Drop the partial window and retry from uniform weights. Particles
                // that overflowed are redrawn from the initial law.
                log::warn!("step {t}: {e}; weights reset to uniform");
                rec.diagnostics.collapses += 1;
                let mut kept = live.detach(&tape, last.0, std::mem::take(&mut last.1));
                if matches!(e, Error::NonFinite { .. }) {
                    kept = init_particles(&cfg.filter, rng)?;
                }
                let n = kept.len();
                kept.log_w = vec![S::of(-(n as f64).ln()); n];
                tape = Tape::new();
                live = kept.attach(&mut tape);
                acc.terms.clear();
                sq_terms.clear();
                let noise = standard_normal(cfg.filter.num_particles, dx, rng);
                filter_step(&mut tape, store, model, &mut live, y, noise, &cfg.filter, rng, &mut rec.diagnostics)?
            }
            Err(e) => return Err(e),
        };
        let est = st.unstate(&tape.value(out.estimate).to_f64_vec());
        if let Some(tr) = truth {
            rec.squared_errors.push(est.iter().zip(&tr[k]).map(|(a, b)| (a - b) * (a - b)).sum());
        }
        rec.estimates.push(est);
        acc.push(out.lse_w, out.lse_prev);
        if let Some(tg) = &targets {
            let target = tape.constant(tg[k].clone());
            sq_terms.push(tape.squared_error(out.estimate, target)?);
        }
        last = (out.resampled, out.ancestors);

        if t % cfg.window != 0 {
            continue;
        }
        if acc.is_full() {
            let elbo = window_loss(&mut tape, &acc)?;
            rec.window_losses.push(tape.item(elbo).to_f64_lossy());
            let root = match method {
                OnlineMethod::Frozen => None,
                OnlineMethod::Unsupervised => Some(elbo),
                OnlineMethod::Supervised => {
                    let mut total = tape.scalar(S::zero());
                    for &v in &sq_terms {
                        total = tape.add(total, v)?;
                    }
                    Some(tape.scale(total, S::of(1.0 / sq_terms.len() as f64)))
                }
            };
            if let Some(root) = root {
                if tape.item(root).is_finite() {
                    tape.backward(root, store)?;
                    if adam_step(store, &mut adam) {
                        rec.optimizer_steps += 1;
                    } else {
                        rec.diagnostics.skipped_updates += 1;
                    }
                } else {
                    log::warn!("window {}: non-finite loss, update skipped", acc.window);
                    rec.diagnostics.skipped_updates += 1;
                }
            }
        } else {
            rec.diagnostics.skipped_updates += 1;
        }
        if cfg.snapshot_every > 0 && (acc.window + 1).is_multiple_of(cfg.snapshot_every) {
            rec.snapshots
                .push((acc.window + 1, store.flatten().iter().map(|v| v.to_f64_lossy()).collect()));
        }
        if let Some((dir, every)) = &cfg.checkpoint {
            if *every > 0 && (acc.window + 1).is_multiple_of(*every) {
                store.save(dir.join(format!("window_{:06}.ckpt", acc.window + 1)))?;
            }
        }
        // Truncate the graph: the next window starts from detached particles.
        ens = live.detach(&tape, last.0, std::mem::take(&mut last.1));
        tape = Tape::new();
        live = ens.attach(&mut tape);
        acc.advance();
        sq_terms.clear();
    }
    Ok(rec)
}

/// Runs `steps` filtering steps on an existing tape from `live` with the
/// given per-step noise and returns the window accumulator. Used to check the
/// windowed loss as a smooth function of the parameters.
#[allow(clippy::too_many_arguments)]
pub fn unroll_window<S: Scalar, M: FilterModel<S> + ?Sized, R: Rng + ?Sized>(
    tape: &mut Tape<S>,
    store: &ParameterStore<S>,
    model: &M,
    live: &mut LiveEnsemble,
    observations: &[Vec<S>],
    noise: &[Tensor<S>],
    filter: &FilterConfig,
    rng: &mut R,
) -> Result<(WindowAccumulator, Vec<Var>)> {
    let mut acc = WindowAccumulator::new(0, observations.len());
    let mut estimates = Vec::with_capacity(observations.len());
    let mut diag = FilterDiagnostics::default();
    for (y, n) in observations.iter().zip(noise) {
        let out = filter_step(tape, store, model, live, y, n.clone(), filter, rng, &mut diag)?;
        acc.push(out.lse_w, out.lse_prev);
        estimates.push(out.estimate);
    }
    Ok((acc, estimates))
}
