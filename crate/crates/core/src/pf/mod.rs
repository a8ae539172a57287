//! Particle filter core: initialisation, proposal and weighting, effective
//! sample size, multinomial resampling and the weighted state estimate.

mod models;

use std::io::Write;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{logsumexp, ParameterStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use models::LinearGaussianModel;

/// One additive term of the log-weight update. The full learned-proposal
/// update is
/// `log w = log w̃ + log p_Z(z) − log|J_G| + log g(ẋ) − log|J_T| − log h(x̂) + log|J_F|`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightTerm {
    ObservationBase,
    ObservationLogDet,
    TransitionBase,
    TransitionLogDet,
    ProposalBase,
    ProposalLogDet,
}

impl WeightTerm {
    pub fn sign(self) -> f64 {
        match self {
            WeightTerm::ObservationBase | WeightTerm::TransitionBase | WeightTerm::ProposalLogDet => 1.0,
            WeightTerm::ObservationLogDet | WeightTerm::TransitionLogDet | WeightTerm::ProposalBase => -1.0,
        }
    }
}

/// New particle states with the per-particle (`N×1`) weight terms.
#[derive(Clone, Debug)]
pub struct Proposal {
    pub states: Var,
    pub terms: Vec<(WeightTerm, Var)>,
}

/// A state-space model the filter can propagate and weight.
pub trait FilterModel<S: Scalar> {
    fn state_dim(&self) -> usize;

    fn obs_dim(&self) -> usize;

    /// Draws `x_t` for every row of `prev` from standard-normal `noise`
    /// (`N×state_dim`) given the observation `y` (`1×obs_dim`).
    fn propose(
        &self,
        tape: &mut Tape<S>,
        store: &ParameterStore<S>,
        prev: Var,
        y: Var,
        noise: Var,
    ) -> Result<Proposal>;
}

/// Initial particle law.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialDistribution {
    /// Uniform over per-dimension `(min, max)` bounds.
    Hypercube(Vec<(f64, f64)>),
    /// `N(0, I)` in `dim` dimensions.
    StandardNormal(usize),
}

impl InitialDistribution {
    pub fn dim(&self) -> usize {
        match self {
            InitialDistribution::Hypercube(b) => b.len(),
            InitialDistribution::StandardNormal(d) => *d,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterConfig {
    pub num_particles: usize,
    /// Resample when the ESS falls strictly below this value.
    pub ess_threshold: f64,
    /// With resampling off the filter is a smooth function of the parameters.
    pub resampling: bool,
    pub init: InitialDistribution,
}

impl FilterConfig {
    /// Threshold `N_p / 2`, resampling on.
    pub fn new(num_particles: usize, init: InitialDistribution) -> Self {
        FilterConfig {
            num_particles,
            ess_threshold: num_particles as f64 / 2.0,
            resampling: true,
            init,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_particles;
        if n < 2 {
            return Err(Error::invalid(format!("need at least 2 particles, got {n}")));
        }
        if !(self.ess_threshold > 1.0 && self.ess_threshold <= n as f64) {
            return Err(Error::invalid(format!(
                "ESS threshold {} outside (1, {n}]",
                self.ess_threshold
            )));
        }
        Ok(())
    }
}

/// Particles between steps, detached from any graph. `log_w` holds `log w̃`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleEnsemble<S> {
    pub states: Tensor<S>,
    pub log_w: Vec<S>,
    pub resampled: bool,
    /// Ancestor indices of the last resampling, empty if it did not resample.
    pub ancestors: Vec<usize>,
}

impl<S: Scalar> ParticleEnsemble<S> {
    pub fn len(&self) -> usize {
        self.log_w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_w.is_empty()
    }

    /// Places the ensemble on `tape` as constants.
    pub fn attach(&self, tape: &mut Tape<S>) -> LiveEnsemble {
        LiveEnsemble {
            states: tape.constant(self.states.clone()),
            log_w: tape.constant(Tensor::column(&self.log_w)),
        }
    }
}

/// Particles on a tape during a window; gradients flow through both fields.
#[derive(Clone, Copy, Debug)]
pub struct LiveEnsemble {
    pub states: Var,
    /// `N×1` unnormalised `log w̃`.
    pub log_w: Var,
}

impl LiveEnsemble {
    /// Reads the values back, shifting log-weights so they sum to one. The
    /// shift leaves every weight ratio, and so every loss term, unchanged.
    pub fn detach<S: Scalar>(&self, tape: &Tape<S>, resampled: bool, ancestors: Vec<usize>) -> ParticleEnsemble<S> {
        let lw = tape.value(self.log_w).data();
        let m = logsumexp(lw);
        let log_w = if m.is_finite() {
            lw.iter().map(|&v| v - m).collect()
        } else {
            lw.to_vec()
        };
        ParticleEnsemble {
            states: tape.value(self.states).clone(),
            log_w,
            resampled,
            ancestors,
        }
    }
}

pub fn init_particles<S: Scalar, R: Rng + ?Sized>(cfg: &FilterConfig, rng: &mut R) -> Result<ParticleEnsemble<S>> {
    let n = cfg.num_particles;
    if n < 1 {
        return Err(Error::invalid("need at least one particle"));
    }
    let states = match &cfg.init {
        InitialDistribution::Hypercube(bounds) => {
            for (k, &(lo, hi)) in bounds.iter().enumerate() {
                if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                    return Err(Error::invalid(format!("bad initial bounds [{lo}, {hi}] in dimension {k}")));
                }
            }
            let d = bounds.len();
            let mut data = Vec::with_capacity(n * d);
            for _ in 0..n {
                for &(lo, hi) in bounds {
                    let u: f64 = rng.random();
                    data.push(S::of(lo + (hi - lo) * u));
                }
            }
            Tensor::from_vec(n, d, data)?
        }
        InitialDistribution::StandardNormal(d) => standard_normal(n, *d, rng),
    };
    Ok(ParticleEnsemble {
        states,
        log_w: vec![S::of(-(n as f64).ln()); n],
        resampled: false,
        ancestors: Vec::new(),
    })
}

pub fn standard_normal<S: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<S> {
    let data = (0..rows * cols).map(|_| S::of(rng.sample(StandardNormal))).collect();
    Tensor::from_vec(rows, cols, data).expect("sized")
}

/// Proposes new particles and returns them with `log w_t` (`N×1`). Every
/// weight term is checked; the first non-finite one is reported.
pub fn propose_and_weight<S: Scalar, M: FilterModel<S> + ?Sized>(
    tape: &mut Tape<S>,
    store: &ParameterStore<S>,
    model: &M,
    live: &LiveEnsemble,
    y: &[S],
    noise: Var,
) -> Result<(Var, Var)> {
    if let Some(k) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "observation",
            index: k,
        });
    }
    let yv = tape.constant(Tensor::row(y));
    let p = model.propose(tape, store, live.states, yv, noise)?;
    let mut log_w = live.log_w;
    for &(term, v) in &p.terms {
        if let Some(particle) = tape.value(v).first_non_finite() {
            return Err(Error::NonFiniteWeight { particle, term });
        }
        log_w = if term.sign() > 0.0 {
            tape.add(log_w, v)?
        } else {
            tape.sub(log_w, v)?
        };
    }
    Ok((p.states, log_w))
}

/// Softmax of log-weights.
pub fn normalize<S: Scalar>(log_w: &[S]) -> Result<Vec<S>> {
    let m = logsumexp(log_w);
    if !m.is_finite() {
        return Err(Error::FilterCollapse);
    }
    Ok(log_w.iter().map(|&v| (v - m).exp()).collect())
}

/// `1 / Σ w²` of normalised weights.
pub fn ess<S: Scalar>(weights: &[S]) -> S {
    S::one() / weights.iter().map(|&w| w * w).sum::<S>()
}

/// `N` ancestors drawn i.i.d. from the normalised weights.
pub fn multinomial_ancestors<S: Scalar, R: Rng + ?Sized>(weights: &[S], rng: &mut R) -> Result<Vec<usize>> {
    let w: Vec<f64> = weights.iter().map(|v| v.to_f64_lossy()).collect();
    let dist = WeightedIndex::new(&w).map_err(|e| Error::invalid(format!("resampling weights: {e}")))?;
    Ok((0..weights.len()).map(|_| dist.sample(rng)).collect())
}

/// Multinomial resampling of a detached ensemble: states gathered by the
/// ancestors, every `w̃` reset to one.
pub fn multinomial_resample<S: Scalar, R: Rng + ?Sized>(
    ens: &ParticleEnsemble<S>,
    rng: &mut R,
) -> Result<ParticleEnsemble<S>> {
    let w = normalize(&ens.log_w)?;
    let ancestors = multinomial_ancestors(&w, rng)?;
    let mut data = Vec::with_capacity(ens.states.len());
    for &a in &ancestors {
        data.extend_from_slice(ens.states.row_slice(a));
    }
    Ok(ParticleEnsemble {
        states: Tensor::from_vec(ancestors.len(), ens.states.cols(), data)?,
        log_w: vec![S::zero(); ancestors.len()],
        resampled: true,
        ancestors,
    })
}

/// `Σ w̄_i x_i` of a detached ensemble.
pub fn estimate_state<S: Scalar>(ens: &ParticleEnsemble<S>) -> Result<Vec<S>> {
    let w = normalize(&ens.log_w)?;
    let mut out = vec![S::zero(); ens.states.cols()];
    for (i, &wi) in w.iter().enumerate() {
        for (o, &x) in out.iter_mut().zip(ens.states.row_slice(i)) {
            *o += wi * x;
        }
    }
    Ok(out)
}

/// Differentiable `Σ softmax(log_w)_i x_i` as `1×d`.
pub fn estimate_state_var<S: Scalar>(tape: &mut Tape<S>, states: Var, log_w: Var) -> Result<Var> {
    let lse = tape.logsumexp(log_w);
    let shifted = tape.sub(log_w, lse)?;
    let w = tape.exp(shifted);
    let weighted = tape.mul(states, w)?;
    Ok(tape.sum_rows(weighted))
}

/// Result of one filtering step on a tape.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// `1×d` weighted mean.
    pub estimate: Var,
    /// `logsumexp(log w_t)`.
    pub lse_w: Var,
    /// `logsumexp(log w̃_{t−1})`.
    pub lse_prev: Var,
    pub ess: f64,
    pub resampled: bool,
    pub ancestors: Vec<usize>,
}

/// Per-step diagnostics and counters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FilterDiagnostics {
    pub rows: Vec<DiagnosticRow>,
    /// Steps whose largest normalised weight exceeded `1 − 1e-12`.
    pub degenerate_steps: usize,
    pub collapses: usize,
    pub skipped_updates: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiagnosticRow {
    pub t: usize,
    pub ess: f64,
    pub resampled: bool,
    pub log_evidence_increment: f64,
}

impl FilterDiagnostics {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "t,ess,resampled,log_evidence_increment")?;
        for r in &self.rows {
            writeln!(f, "{},{},{},{}", r.t, r.ess, u8::from(r.resampled), r.log_evidence_increment)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// One step: propose and weight, estimate, then resample if the ESS drops
/// below the threshold. `live` is advanced in place. Ancestor draws consume
/// `rng` only when resampling happens.
#[allow(clippy::too_many_arguments)]
pub fn filter_step<S: Scalar, M: FilterModel<S> + ?Sized, R: Rng + ?Sized>(
    tape: &mut Tape<S>,
    store: &ParameterStore<S>,
    model: &M,
    live: &mut LiveEnsemble,
    y: &[S],
    noise: Tensor<S>,
    cfg: &FilterConfig,
    rng: &mut R,
    diag: &mut FilterDiagnostics,
) -> Result<StepOutput> {
    let noise = tape.constant(noise);
    let (states, log_w) = propose_and_weight(tape, store, model, live, y, noise)?;
    let lse_prev = tape.logsumexp(live.log_w);
    let lse_w = tape.logsumexp(log_w);
    let weights = normalize(tape.value(log_w).data())?;
    let estimate = estimate_state_var(tape, states, log_w)?;
    let e = ess(&weights).to_f64_lossy();
    if weights.iter().any(|w| w.to_f64_lossy() > 1.0 - 1e-12) {
        diag.degenerate_steps += 1;
    }
    diag.rows.push(DiagnosticRow {
        t: diag.rows.len() + 1,
        ess: e,
        resampled: false,
        log_evidence_increment: (tape.item(lse_w) - tape.item(lse_prev)).to_f64_lossy(),
    });
    let mut ancestors = Vec::new();
    if cfg.resampling && e < cfg.ess_threshold {
        ancestors = multinomial_ancestors(&weights, rng)?;
        live.states = tape.gather_rows(states, &ancestors)?;
        live.log_w = tape.constant(Tensor::zeros(ancestors.len(), 1));
        diag.rows.last_mut().expect("pushed").resampled = true;
    } else {
        live.states = states;
        live.log_w = log_w;
    }
    Ok(StepOutput {
        estimate,
        lse_w,
        lse_prev,
        ess: e,
        resampled: !ancestors.is_empty(),
        ancestors,
    })
}

/// Output of a pass with fixed parameters.
#[derive(Clone, Debug)]
pub struct FilterRun {
    /// Filtering means for `t = 1..T`.
    pub estimates: Vec<Vec<f64>>,
    /// `log p̂(y_{1:T})`.
    pub log_evidence: f64,
    pub diagnostics: FilterDiagnostics,
}

/// Filters `observations` without learning, one fresh tape per step.
pub fn run_filter<S: Scalar, M: FilterModel<S> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    store: &ParameterStore<S>,
    observations: &[Vec<S>],
    cfg: &FilterConfig,
    rng: &mut R,
) -> Result<FilterRun> {
    cfg.validate()?;
    let mut ens = init_particles::<S, _>(cfg, rng)?;
    let mut diag = FilterDiagnostics::default();
    let mut estimates = Vec::with_capacity(observations.len());
    let mut log_evidence = 0.0;
    for y in observations {
        let mut tape = Tape::new();
        let mut live = ens.attach(&mut tape);
        let noise = standard_normal(cfg.num_particles, model.state_dim(), rng);
        let out = filter_step(&mut tape, store, model, &mut live, y, noise, cfg, rng, &mut diag)?;
        log_evidence += (tape.item(out.lse_w) - tape.item(out.lse_prev)).to_f64_lossy();
        estimates.push(tape.value(out.estimate).to_f64_vec());
        ens = live.detach(&tape, out.resampled, out.ancestors);
    }
    Ok(FilterRun {
        estimates,
        log_evidence,
        diagnostics: diag,
    })
}
