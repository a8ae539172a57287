//! Experiment pipeline: offline data, pretraining, online runs of each method
//! over many seeds, and the CSV and text outputs.

mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParameterStore;
use crate::error::{Error, Result};
use crate::flows::FlowModel;
use crate::learn::{pretrain, run_online, OnlineConfig, OnlineMethod, PretrainReport};
use crate::pf::{FilterConfig, InitialDistribution};
use crate::ssm::{generate_dataset, state_bounds, trajectory_rng, Phase, Standardizer, Trajectory};

pub use config::{ExperimentConfig, InitMode, OnlineSection, PretrainSection, RmseScope, CONFIG_VERSION};

/// `sqrt(mean_t ‖x̂_t − x_t‖²)`.
pub fn rmse(estimates: &[Vec<f64>], truths: &[Vec<f64>]) -> Result<f64> {
    if estimates.len() != truths.len() || estimates.is_empty() {
        return Err(Error::invalid(format!(
            "rmse over {} estimates and {} truths",
            estimates.len(),
            truths.len()
        )));
    }
    let mut s = 0.0;
    for (e, x) in estimates.iter().zip(truths) {
        if e.len() != x.len() {
            return Err(Error::invalid("rmse over vectors of different length"));
        }
        s += e.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok((s / estimates.len() as f64).sqrt())
}

/// Standardisation and initial bounds stored next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub standardizer: Standardizer,
    /// Per-dimension range of the offline states in model coordinates.
    pub init_bounds: Vec<(f64, f64)>,
}

fn meta_path(ckpt: &Path) -> PathBuf {
    let mut p = ckpt.as_os_str().to_owned();
    p.push(".meta.json");
    PathBuf::from(p)
}

/// Pretrained parameters and everything needed to run them online.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub store: ParameterStore<f64>,
    pub model: FlowModel,
    pub meta: CheckpointMeta,
    pub report: Option<PretrainReport>,
}

impl Pretrained {
    pub fn filter_config(&self, cfg: &ExperimentConfig) -> FilterConfig {
        let init = match cfg.init {
            InitMode::Hypercube => InitialDistribution::Hypercube(self.meta.init_bounds.clone()),
            InitMode::StandardNormal => InitialDistribution::StandardNormal(cfg.model.state_dim()),
        };
        FilterConfig::new(cfg.particles, init)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        self.store.save(path)?;
        std::fs::write(meta_path(path), serde_json::to_string_pretty(&self.meta)?)?;
        Ok(())
    }
}

pub fn offline_data(cfg: &ExperimentConfig) -> Result<Vec<Trajectory>> {
    generate_dataset(cfg.model, Phase::Pretrain, cfg.pretrain.n_traj, cfg.pretrain.steps, cfg.data_seed)
}

/// The online trajectory of `seed`.
pub fn online_data(cfg: &ExperimentConfig, seed: u64) -> Result<Trajectory> {
    Ok(generate_dataset(cfg.model, Phase::Online, 1, cfg.online.steps, seed)?.remove(0))
}

/// Untrained model, deterministic in `data_seed`.
pub fn build_model(cfg: &ExperimentConfig) -> Result<(ParameterStore<f64>, FlowModel)> {
    let mut store = ParameterStore::new();
    let mut rng = trajectory_rng(cfg.data_seed, u64::MAX);
    let model = FlowModel::new(
        &mut store,
        cfg.model.state_dim(),
        cfg.model.obs_dim(),
        &cfg.flow,
        &mut rng,
    )?;
    Ok((store, model))
}

/// Generates the offline data, fits the standardisation and pretrains.
pub fn pretrain_stage(cfg: &ExperimentConfig) -> Result<Pretrained> {
    cfg.validate()?;
    let data = offline_data(cfg)?;
    let standardizer = Standardizer::fit(&data)?;
    let normalised: Vec<Trajectory> = data.iter().map(|t| standardizer.trajectory(t)).collect();
    let meta = CheckpointMeta {
        standardizer,
        init_bounds: state_bounds(&normalised),
    };
    let (mut store, model) = build_model(cfg)?;
    let mut pre = Pretrained {
        store: ParameterStore::new(),
        model,
        meta,
        report: None,
    };
    let filter = pre.filter_config(cfg);
    let mut rng = trajectory_rng(cfg.data_seed, u64::MAX - 1);
    let report = pretrain(
        &data,
        &pre.model,
        &mut store,
        &cfg.pretrain_config(),
        &filter,
        &pre.meta.standardizer,
        &mut rng,
    )?;
    log::info!(
        "pretraining: validation MSE {:.4} -> {:.4} (best epoch {:?})",
        report.initial_validation_loss,
        report.best_validation_loss,
        report.best_epoch
    );
    pre.store = store;
    pre.report = Some(report);
    Ok(pre)
}

/// Loads the checkpoint named by the config (or its default location).
pub fn load_pretrained(cfg: &ExperimentConfig) -> Result<Pretrained> {
    let path = cfg.checkpoint_path();
    if !path.exists() || !meta_path(&path).exists() {
        return Err(Error::Config(format!(
            "no pretrained checkpoint at {}; run `oldpf pretrain --config <file>` first or set `checkpoint`",
            path.display()
        )));
    }
    let (mut store, model) = build_model(cfg)?;
    let loaded = ParameterStore::<f64>::load(&path)?;
    store.copy_values_from(&loaded)?;
    let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(meta_path(&path))?)?;
    Ok(Pretrained {
        store,
        model,
        meta,
        report: None,
    })
}

/// One method on one seed.
#[derive(Clone, Debug)]
pub struct MethodRun {
    pub seed: u64,
    pub method: OnlineMethod,
    /// Per-step error `‖x̂_t − x_t‖` over the scored components.
    pub errors: Vec<f64>,
    pub rmse: f64,
    pub optimizer_steps: u64,
    pub collapses: usize,
}

/// Runs every configured method on the online trajectory of `seed`. All
/// methods share the particle random stream.
pub fn run_seed(cfg: &ExperimentConfig, pre: &Pretrained, seed: u64) -> Result<Vec<MethodRun>> {
    let traj = online_data(cfg, seed)?;
    let truth = &traj.states[1..];
    let idx = cfg.rmse_scope.indices(cfg.model);
    let mut out = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let mut store = pre.store.clone();
        let checkpoint = (cfg.online.checkpoint_every > 0).then(|| {
            let dir = cfg
                .out_dir
                .join("checkpoints")
                .join(format!("seed{seed}-{}", method.label()));
            (dir, cfg.online.checkpoint_every)
        });
        if let Some((dir, _)) = &checkpoint {
            std::fs::create_dir_all(dir)?;
        }
        let online = OnlineConfig {
            window: cfg.window,
            adam: cfg.adam(),
            filter: pre.filter_config(cfg),
            standardizer: pre.meta.standardizer.clone(),
            snapshot_every: 0,
            checkpoint,
        };
        let mut rng = trajectory_rng(seed, 1 << 32);
        let rec = run_online(method, &traj.observations, Some(truth), &pre.model, &mut store, &online, &mut rng)?;
        let errors: Vec<f64> = rec
            .estimates
            .iter()
            .zip(truth)
            .map(|(e, x)| idx.iter().map(|&k| (e[k] - x[k]).powi(2)).sum::<f64>().sqrt())
            .collect();
        let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt();
        log::info!("seed {seed} {}: RMSE {rmse:.4}", method.label());
        out.push(MethodRun {
            seed,
            method,
            errors,
            rmse,
            optimizer_steps: rec.optimizer_steps,
            collapses: rec.diagnostics.collapses,
        });
    }
    Ok(out)
}

/// Aggregate of one method across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodSummary {
    pub method: OnlineMethod,
    pub per_seed: Vec<(u64, f64)>,
    pub mean: f64,
    /// Sample standard deviation (zero for one seed).
    pub std: f64,
    /// Per-step error averaged over seeds.
    pub curve_mean: Vec<f64>,
    /// `mean ± 1.96·std/√n` per step.
    pub curve_ci: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub label: String,
    pub methods: Vec<MethodSummary>,
}

impl RunSummary {
    pub fn method(&self, m: OnlineMethod) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m)
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Per-method aggregation of `(seed, method, per-step errors)` records.
pub fn summarize(label: &str, runs: &[(u64, OnlineMethod, Vec<f64>)]) -> Result<RunSummary> {
    let mut by: BTreeMap<OnlineMethod, Vec<(u64, &Vec<f64>)>> = BTreeMap::new();
    for (seed, m, e) in runs {
        by.entry(*m).or_default().push((*seed, e));
    }
    let mut methods = Vec::new();
    for (method, mut seeds) in by {
        seeds.sort_by_key(|s| s.0);
        let steps = seeds[0].1.len();
        if seeds.iter().any(|s| s.1.len() != steps) {
            return Err(Error::invalid(format!("{}: seeds differ in length", method.label())));
        }
        let per_seed: Vec<(u64, f64)> = seeds
            .iter()
            .map(|(s, e)| (*s, (e.iter().map(|v| v * v).sum::<f64>() / steps as f64).sqrt()))
            .collect();
        let (mean, std) = mean_std(&per_seed.iter().map(|p| p.1).collect::<Vec<_>>());
        let n = seeds.len() as f64;
        let mut curve_mean = Vec::with_capacity(steps);
        let mut curve_ci = Vec::with_capacity(steps);
        for t in 0..steps {
            let col: Vec<f64> = seeds.iter().map(|s| s.1[t]).collect();
            let (m, s) = mean_std(&col);
            let h = 1.96 * s / n.sqrt();
            curve_mean.push(m);
            curve_ci.push((m - h, m + h));
        }
        methods.push(MethodSummary {
            method,
            per_seed,
            mean,
            std,
            curve_mean,
            curve_ci,
        });
    }
    Ok(RunSummary {
        label: label.to_string(),
        methods,
    })
}

/// Writes `metrics.csv`, `seeds.csv`, `aggregate.csv` and `summary.txt`.
pub fn write_outputs(dir: &Path, runs: &[MethodRun], summary: &RunSummary) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut m = std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.csv"))?);
    writeln!(m, "seed,t,method,rmse")?;
    for r in runs {
        for (k, e) in r.errors.iter().enumerate() {
            writeln!(m, "{},{},{},{e}", r.seed, k + 1, r.method.label())?;
        }
    }
    m.flush()?;
    let mut s = std::io::BufWriter::new(std::fs::File::create(dir.join("seeds.csv"))?);
    writeln!(s, "seed,method,rmse,optimizer_steps,collapses")?;
    for r in runs {
        writeln!(
            s,
            "{},{},{},{},{}",
            r.seed,
            r.method.label(),
            r.rmse,
            r.optimizer_steps,
            r.collapses
        )?;
    }
    s.flush()?;
    let mut a = std::io::BufWriter::new(std::fs::File::create(dir.join("aggregate.csv"))?);
    writeln!(a, "method,t,mean,ci_low,ci_high")?;
    for ms in &summary.methods {
        for (k, (mean, ci)) in ms.curve_mean.iter().zip(&ms.curve_ci).enumerate() {
            writeln!(a, "{},{},{mean},{},{}", ms.method.label(), k + 1, ci.0, ci.1)?;
        }
    }
    a.flush()?;
    std::fs::write(dir.join("summary.txt"), summary_text(summary))?;
    Ok(())
}

pub fn summary_text(summary: &RunSummary) -> String {
    let mut out = String::new();
    let seeds = summary.methods.first().map_or(0, |m| m.per_seed.len());
    let _ = writeln!(out, "{} ({} seeds)", summary.label, seeds);
    let _ = writeln!(out, "{:<16} {:>12} {:>12}", "method", "rmse_mean", "rmse_std");
    for m in &summary.methods {
        let _ = writeln!(out, "{:<16} {:>12.4} {:>12.4}", m.method.label(), m.mean, m.std);
    }
    out
}

/// Online stage for every seed (in parallel) from pretrained parameters.
pub fn online_stage(cfg: &ExperimentConfig, pre: &Pretrained) -> Result<(Vec<MethodRun>, RunSummary)> {
    cfg.validate()?;
    let per_seed: Vec<Result<Vec<MethodRun>>> = cfg.seeds.par_iter().map(|&s| run_seed(cfg, pre, s)).collect();
    let mut runs = Vec::new();
    for r in per_seed {
        runs.extend(r?);
    }
    let records: Vec<(u64, OnlineMethod, Vec<f64>)> =
        runs.iter().map(|r| (r.seed, r.method, r.errors.clone())).collect();
    let summary = summarize(&ExperimentConfig::slug(cfg.model), &records)?;
    write_outputs(&cfg.out_dir, &runs, &summary)?;
    Ok((runs, summary))
}

/// Pretrains (or loads `checkpoint`), saves the checkpoint and runs every
/// seed and method.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let pre = if cfg.checkpoint.is_some() {
        load_pretrained(cfg)?
    } else {
        let pre = pretrain_stage(cfg)?;
        pre.save(&cfg.checkpoint_path())?;
        pre
    };
    Ok(online_stage(cfg, &pre)?.1)
}

/// Rebuilds the summary from a `metrics.csv`.
pub fn evaluate(out_dir: &Path) -> Result<RunSummary> {
    let path = out_dir.join("metrics.csv");
    let mut r = csv::Reader::from_path(&path)?;
    let mut series: BTreeMap<(u64, OnlineMethod), Vec<(usize, f64)>> = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let bad = || Error::invalid(format!("{}: malformed row {:?}", path.display(), rec));
        let seed: u64 = rec[0].parse().map_err(|_| bad())?;
        let t: usize = rec[1].parse().map_err(|_| bad())?;
        let method = OnlineMethod::parse(&rec[2])?;
        let e: f64 = rec[3].parse().map_err(|_| bad())?;
        series.entry((seed, method)).or_default().push((t, e));
    }
    let records: Vec<(u64, OnlineMethod, Vec<f64>)> = series
        .into_iter()
        .map(|((s, m), mut v)| {
            v.sort_by_key(|p| p.0);
            (s, m, v.into_iter().map(|p| p.1).collect())
        })
        .collect();
    let label = out_dir
        .file_name()
        .map_or_else(|| "run".to_string(), |n| n.to_string_lossy().into_owned());
    summarize(&label, &records)
}

/// Table rows (methods) by columns (experiments) as `mean ± std`, with the
/// ordering checks underneath.
pub fn table_text(title: &str, columns: &[RunSummary]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let _ = write!(out, "{:<16}", "method");
    for c in columns {
        let _ = write!(out, " {:>22}", c.label);
    }
    let _ = writeln!(out);
    for m in OnlineMethod::ALL {
        let _ = write!(out, "{:<16}", m.label());
        for c in columns {
            match c.method(m) {
                Some(s) => {
                    let _ = write!(out, " {:>22}", format!("{:.3} ± {:.3}", s.mean, s.std));
                }
                None => {
                    let _ = write!(out, " {:>22}", "-");
                }
            }
        }
        let _ = writeln!(out);
    }
    for c in columns {
        for (name, ok) in ordering_checks(c) {
            let _ = writeln!(out, "{} {}: {}", c.label, name, if ok { "holds" } else { "violated" });
        }
    }
    out
}

/// `(description, holds)` for the expected method ordering.
pub fn ordering_checks(s: &RunSummary) -> Vec<(&'static str, bool)> {
    let get = |m| s.method(m).map(|x| x.mean);
    let mut out = Vec::new();
    if let (Some(f), Some(u)) = (get(OnlineMethod::Frozen), get(OnlineMethod::Unsupervised)) {
        out.push(("ol-dpf < pretrained-dpf", u < f));
    }
    if let Some(o) = get(OnlineMethod::Supervised) {
        let others = [get(OnlineMethod::Frozen), get(OnlineMethod::Unsupervised)];
        out.push(("oracle-dpf lowest", others.iter().flatten().all(|&v| o <= v)));
    }
    out
}

/// Runs the four standard experiments (linear Gaussian `d ∈ {2, 5, 10}` and
/// tracking) under `root` and writes `table1.txt` and `table2.txt`.
pub fn reproduce_all(root: &Path, full_scale: bool, adjust: impl Fn(&mut ExperimentConfig)) -> Result<String> {
    use crate::ssm::ModelKind;
    let make = |model| {
        let mut c = if full_scale {
            ExperimentConfig::full_scale(model)
        } else {
            ExperimentConfig::desk(model)
        };
        c.out_dir = root.join(ExperimentConfig::slug(model));
        adjust(&mut c);
        c
    };
    let mut lgssm = Vec::new();
    for dim in [2, 5, 10] {
        lgssm.push(run_experiment(&make(ModelKind::Lgssm { dim }))?);
    }
    let tracking = run_experiment(&make(ModelKind::Tracking))?;
    let t1 = table_text("Linear Gaussian: online RMSE (mean ± std over seeds)", &lgssm);
    let t2 = table_text("Tracking: online RMSE (mean ± std over seeds)", &[tracking]);
    std::fs::write(root.join("table1.txt"), &t1)?;
    std::fs::write(root.join("table2.txt"), &t2)?;
    Ok(format!("{t1}\n{t2}"))
}
