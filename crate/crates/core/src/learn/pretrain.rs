use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use crate::autodiff::{ParameterStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::pf::{filter_step, init_particles, standard_normal, FilterConfig, FilterDiagnostics, FilterModel};
use crate::scalar::Scalar;
use crate::ssm::{Standardizer, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Upper bound on epochs.
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    /// Share of trajectories held out for early stopping.
    pub validation_fraction: f64,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            batch_size: 16,
            patience: 5,
            validation_fraction: 0.1,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainReport {
    pub train_losses: Vec<f64>,
    pub validation_losses: Vec<f64>,
    /// `None` when no epoch beat the initial parameters.
    pub best_epoch: Option<usize>,
    pub initial_validation_loss: f64,
    pub best_validation_loss: f64,
}

/// Mean over time of `‖x̂_t − x_t‖²` for one trajectory in model
/// coordinates, filtering with a fresh particle ensemble.
pub fn trajectory_mse<S: Scalar, M: FilterModel<S> + ?Sized, R: Rng + ?Sized>(
    tape: &mut Tape<S>,
    store: &ParameterStore<S>,
    model: &M,
    observations: &[Vec<S>],
    states: &[Vec<S>],
    filter: &FilterConfig,
    rng: &mut R,
) -> Result<Var> {
    let ens = init_particles::<S, _>(filter, rng)?;
    let mut live = ens.attach(tape);
    let mut diag = FilterDiagnostics::default();
    let mut total = tape.scalar(S::zero());
    for (y, x) in observations.iter().zip(states) {
        let noise = standard_normal(filter.num_particles, model.state_dim(), rng);
        let out = filter_step(tape, store, model, &mut live, y, noise, filter, rng, &mut diag)?;
        let target = tape.constant(Tensor::row(x));
        let se = tape.squared_error(out.estimate, target)?;
        total = tape.add(total, se)?;
    }
    Ok(tape.scale(total, S::of(1.0 / observations.len().max(1) as f64)))
}

type Normalised<S> = (Vec<Vec<S>>, Vec<Vec<S>>);

fn normalise<S: Scalar>(st: &Standardizer, t: &Trajectory) -> Normalised<S> {
    let conv = |v: Vec<f64>| v.into_iter().map(S::of).collect::<Vec<S>>();
    (
        t.observations.iter().map(|y| conv(st.obs(y))).collect(),
        t.states[1..].iter().map(|x| conv(st.state(x))).collect(),
    )
}

fn evaluate<S: Scalar, M: FilterModel<S> + ?Sized>(
    data: &[Normalised<S>],
    model: &M,
    store: &ParameterStore<S>,
    filter: &FilterConfig,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    for (ys, xs) in data {
        let mut tape = Tape::new();
        let l = trajectory_mse(&mut tape, store, model, ys, xs, filter, &mut rng)?;
        sum += tape.item(l).to_f64_lossy();
    }
    Ok(sum / data.len() as f64)
}

/// Supervised pretraining on whole trajectories: mini-batches of per-trajectory
/// MSE, Adam, early stopping on a held-out split. The parameters with the best
/// validation loss are left in `store`.
pub fn pretrain<S: Scalar, M: FilterModel<S> + ?Sized, R: Rng + ?Sized>(
    data: &[Trajectory],
    model: &M,
    store: &mut ParameterStore<S>,
    cfg: &PretrainConfig,
    filter: &FilterConfig,
    standardizer: &Standardizer,
    rng: &mut R,
) -> Result<PretrainReport> {
    filter.validate()?;
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(Error::invalid("pretraining needs data and a positive batch size"));
    }
    let all: Vec<Normalised<S>> = data.iter().map(|t| normalise(standardizer, t)).collect();
    let n_val = if data.len() > 1 {
        ((data.len() as f64 * cfg.validation_fraction).round() as usize).clamp(1, data.len() - 1)
    } else {
        0
    };
    let (train, val) = all.split_at(data.len() - n_val);
    let val = if val.is_empty() { train } else { val };
    let val_seed: u64 = rng.random();

    let mut adam = AdamState::new(store, cfg.adam);
    let mut report = PretrainReport {
        initial_validation_loss: evaluate(val, model, store, filter, val_seed)?,
        ..Default::default()
    };
    let mut best = (report.initial_validation_loss, store.flatten());
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let weight = S::of(1.0 / batch.len() as f64);
            for &i in batch {
                let (ys, xs) = &train[i];
                let mut tape = Tape::new();
                let l = trajectory_mse(&mut tape, store, model, ys, xs, filter, rng)?;
                let v = tape.item(l).to_f64_lossy();
                if !v.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: b });
                }
                epoch_loss += v;
                let root = tape.scale(l, weight);
                tape.backward(root, store)?;
            }
            adam_step(store, &mut adam);
        }
        report.train_losses.push(epoch_loss / train.len() as f64);
        let v = evaluate(val, model, store, filter, val_seed)?;
        log::info!(
            "pretrain epoch {epoch}: train {:.5} validation {v:.5}",
            epoch_loss / train.len() as f64
        );
        report.validation_losses.push(v);
        if v < best.0 {
            best = (v, store.flatten());
            report.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    report.best_validation_loss = best.0;
    store.unflatten(&best.1)?;
    Ok(report)
}
