//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits with a
//! non-zero status if any criterion fails.
//!
//! Run with `cargo test --release --test acceptance`.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::{ContinuousCDF, StudentsT};

use oldpf::autodiff::{ParameterStore, Tape, Tensor};
use oldpf::experiment::{
    ordering_checks, reproduce_all, rmse, run_experiment, ExperimentConfig, InitMode, RunSummary,
};
use oldpf::flows::{AffineCoupling, FlowConfig, FlowModel};
use oldpf::learn::{run_online, unroll_window, window_loss, AdamConfig, OnlineConfig, OnlineMethod};
use oldpf::oracle::{finite_diff_grad, kalman_filter};
use oldpf::pf::{
    ess, init_particles, multinomial_ancestors, normalize, run_filter, standard_normal, FilterConfig,
    InitialDistribution, LinearGaussianModel,
};
use oldpf::ssm::{generate_dataset, lgssm_params, ModelKind, Phase, Standardizer};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed.as_secs() < limit_s
}

/// Mean RMSE of the bootstrap filter and the Kalman filter over 20 seeds.
fn bootstrap_and_kalman_rmse(phase: Phase) -> (f64, f64) {
    let params = lgssm_params(phase, 2).unwrap();
    let model = LinearGaussianModel::<f64>::new(&params);
    let store = ParameterStore::new();
    let cfg = FilterConfig::new(1000, InitialDistribution::StandardNormal(2));
    let (mut pf, mut kf) = (0.0, 0.0);
    for seed in 0..20 {
        let t = generate_dataset(ModelKind::Lgssm { dim: 2 }, phase, 1, 50, 500 + seed)
            .unwrap()
            .remove(0);
        let run = run_filter(&model, &store, &t.observations, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let k = kalman_filter(&params, &t.observations).unwrap();
        let means: Vec<Vec<f64>> = k.means.iter().map(|m| m.as_slice().to_vec()).collect();
        pf += rmse(&run.estimates, &t.states[1..]).unwrap() / 20.0;
        kf += rmse(&means, &t.states[1..]).unwrap() / 20.0;
    }
    (pf, kf)
}

fn bootstrap_matches_kalman() -> Outcome {
    let start = Instant::now();
    let (pf, kf) = bootstrap_and_kalman_rmse(Phase::Pretrain);
    let secs = start.elapsed();
    let rel = (pf - kf).abs() / kf;
    // The online parameters give a posterior far narrower than the transition
    // noise, where a bootstrap proposal degenerates; reported for reference.
    let (pf_on, kf_on) = bootstrap_and_kalman_rmse(Phase::Online);
    outcome(
        rel < 0.10 && within(secs, 60),
        format!(
            "PF RMSE {pf:.4}, KF RMSE {kf:.4}, gap {:.2}% (< 10%), {secs:.1?} (< 1 min); online parameters: gap {:.1}%",
            100.0 * rel,
            100.0 * (pf_on - kf_on).abs() / kf_on
        ),
    )
}

fn evidence_is_unbiased() -> Outcome {
    let start = Instant::now();
    let params = lgssm_params(Phase::Pretrain, 2).unwrap();
    let model = LinearGaussianModel::<f64>::new(&params);
    let store = ParameterStore::new();
    let cfg = FilterConfig::new(100, InitialDistribution::StandardNormal(2));
    let t = generate_dataset(ModelKind::Lgssm { dim: 2 }, Phase::Pretrain, 1, 5, 77)
        .unwrap()
        .remove(0);
    let log_z = kalman_filter(&params, &t.observations).unwrap().log_evidence;
    let runs = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mean_ratio = 0.0;
    for _ in 0..runs {
        let r = run_filter(&model, &store, &t.observations, &cfg, &mut rng).unwrap();
        mean_ratio += (r.log_evidence - log_z).exp() / runs as f64;
    }
    let secs = start.elapsed();
    outcome(
        (mean_ratio - 1.0).abs() < 0.05 && within(secs, 120),
        format!("mean p̂ / p = {mean_ratio:.4} over {runs} runs (within 5%), {secs:.1?} (< 2 min)"),
    )
}

fn window_gradient_error(seed: u64) -> f64 {
    let (window, particles) = (3, 10);
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flow = FlowConfig {
        depth: 2,
        hidden: 8,
        ..FlowConfig::default()
    };
    let model = FlowModel::new(&mut store, 2, 2, &flow, &mut rng).unwrap();
    let perturb = Normal::new(0.0, 0.3).unwrap();
    let flat: Vec<f64> = store.flatten().iter().map(|v| v + perturb.sample(&mut rng)).collect();
    store.unflatten(&flat).unwrap();
    let ys: Vec<Vec<f64>> = (0..window).map(|_| standard_normal::<f64, _>(1, 2, &mut rng).into_data()).collect();
    let mut filter = FilterConfig::new(particles, InitialDistribution::StandardNormal(2));
    filter.resampling = false;
    let ens = init_particles::<f64, _>(&filter, &mut rng).unwrap();
    let noise: Vec<Tensor<f64>> = (0..window).map(|_| standard_normal(particles, 2, &mut rng)).collect();
    let loss = |s: &ParameterStore<f64>| {
        let mut tape = Tape::new();
        let mut live = ens.attach(&mut tape);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let (acc, _) = unroll_window(&mut tape, s, &model, &mut live, &ys, &noise, &filter, &mut r).unwrap();
        let l = window_loss(&mut tape, &acc).unwrap();
        (tape, l)
    };
    let (tape, root) = loss(&store);
    store.zero_grads();
    tape.backward(root, &mut store).unwrap();
    let analytic = store.flatten_grads();
    let numeric = finite_diff_grad(
        |s| {
            let (t, r) = loss(s);
            t.item(r)
        },
        &mut store,
        1e-5,
    );
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / norm
}

fn gradients_match_finite_differences() -> Outcome {
    let worst = (0..20).map(window_gradient_error).fold(0.0, f64::max);
    outcome(
        worst < 1e-3,
        format!("worst relative error {worst:.2e} over 20 parameter draws (< 1e-3)"),
    )
}

fn means(s: &RunSummary) -> [f64; 3] {
    OnlineMethod::ALL.map(|m| s.method(m).map_or(f64::NAN, |x| x.mean))
}

fn desk_run(model: ModelKind, dir: &std::path::Path) -> (RunSummary, Duration) {
    let mut cfg = ExperimentConfig::desk(model);
    cfg.out_dir = dir.to_path_buf();
    let start = Instant::now();
    let s = run_experiment(&cfg).unwrap();
    (s, start.elapsed())
}

fn linear_gaussian_adaptation(s: &RunSummary, secs: Duration) -> Outcome {
    let [pre, ol, oracle] = means(s);
    outcome(
        ol < 0.8 * pre && oracle <= 1.1 * ol && within(secs, 900),
        format!(
            "RMSE pretrained {pre:.3}, ol {ol:.3} (< {:.3}), oracle {oracle:.3} (<= {:.3}), {secs:.1?} (< 15 min)",
            0.8 * pre,
            1.1 * ol
        ),
    )
}

fn moving_average(v: &[f64], w: usize) -> Vec<f64> {
    v.windows(w).map(|c| c.iter().sum::<f64>() / w as f64).collect()
}

fn convergence_shape(s: &RunSummary) -> Outcome {
    let curve = &s.method(OnlineMethod::Unsupervised).unwrap().curve_mean;
    let smooth = moving_average(curve, 100);
    let tail = &smooth[smooth.len() * 4 / 5..];
    let plateau = tail.iter().sum::<f64>() / tail.len() as f64;
    // Index `k` of the smoothed curve covers steps k+1..=k+100.
    let reached = smooth.iter().position(|&v| v <= 1.2 * plateau).map(|k| k + 100);
    outcome(
        reached.is_some_and(|t| t <= 1000),
        format!(
            "plateau {plateau:.3}, smoothed curve within 20% from step {} (<= 1000)",
            reached.map_or("never".to_string(), |t| t.to_string())
        ),
    )
}

fn tracking_ordering(s: &RunSummary, secs: Duration) -> Outcome {
    let pre = &s.method(OnlineMethod::Frozen).unwrap().per_seed;
    let ol = &s.method(OnlineMethod::Unsupervised).unwrap().per_seed;
    let d: Vec<f64> = pre.iter().zip(ol).map(|(a, b)| a.1 - b.1).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let t = mean / (sd / n.sqrt());
    let p = 1.0 - StudentsT::new(0.0, 1.0, n - 1.0).unwrap().cdf(t);
    let [m_pre, m_ol, m_oracle] = means(s);
    let lowest = ordering_checks(s).iter().any(|(name, ok)| name.starts_with("oracle") && *ok);
    outcome(
        p < 0.05 && lowest,
        format!(
            "RMSE pretrained {m_pre:.3}, ol {m_ol:.3}, oracle {m_oracle:.3}; paired t = {t:.3}, one-sided p = {p:.4} (< 0.05); oracle lowest: {lowest}; {secs:.1?}"
        ),
    )
}

fn property_rechecks() -> Outcome {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    // Coupling round trip and log-determinant reciprocity.
    let mut store = ParameterStore::<f64>::new();
    let layer = AffineCoupling::new(&mut store, "c", 3, &[1, 2], 2, 16, 5.0, &mut rng).unwrap();
    let d = Normal::new(0.0, 0.5).unwrap();
    let flat: Vec<f64> = store.flatten().iter().map(|v| v + d.sample(&mut rng)).collect();
    store.unflatten(&flat).unwrap();
    let x = standard_normal::<f64, _>(1000, 3, &mut rng);
    let c = standard_normal::<f64, _>(1000, 2, &mut rng);
    let mut tape = Tape::new();
    let (xv, cv) = (tape.constant(x.clone()), tape.constant(c));
    let (y, ld_f) = layer.forward(&mut tape, &store, xv, Some(cv)).unwrap();
    let (back, ld_i) = layer.inverse(&mut tape, &store, y, Some(cv)).unwrap();
    let round = back_err(tape.value(back).data(), x.data());
    let recip = back_err(tape.value(ld_f).data(), &tape.value(ld_i).map(|v| -v).into_data());
    if round >= 1e-8 || recip >= 1e-8 {
        failures.push(format!("flow round trip {round:.1e}, log-det {recip:.1e}"));
    }

    // ESS bounds and softmax shift invariance.
    for _ in 0..200 {
        let n = rng.random_range(1..50);
        let lw: Vec<f64> = (0..n).map(|_| rng.random_range(-20.0..5.0)).collect();
        let w = normalize(&lw).unwrap();
        let e = ess(&w);
        let shifted = normalize(&lw.iter().map(|v| v + 123.0).collect::<Vec<_>>()).unwrap();
        if !(e >= 1.0 - 1e-9 && e <= n as f64 + 1e-9) || back_err(&w, &shifted) > 1e-12 {
            failures.push(format!("ESS {e} for N = {n} or shift variance"));
            break;
        }
    }
    if (ess(&[0.25f64; 4]) - 4.0).abs() > 1e-12 || (ess(&[1.0f64, 0.0, 0.0]) - 1.0).abs() > 1e-12 {
        failures.push("ESS closed forms".into());
    }

    // Multinomial offspring counts have mean N·w.
    let w = [0.1, 0.2, 0.3, 0.4];
    let trials = 20_000;
    let mut counts = [0.0; 4];
    for _ in 0..trials {
        for a in multinomial_ancestors(&w, &mut rng).unwrap() {
            counts[a] += 1.0 / trials as f64;
        }
    }
    for (i, &wi) in w.iter().enumerate() {
        let sd = (4.0 * wi * (1.0 - wi) / trials as f64).sqrt();
        if (counts[i] - 4.0 * wi).abs() > 5.0 * sd {
            failures.push(format!("offspring mean {} vs {}", counts[i], 4.0 * wi));
        }
    }

    // Zero learning rate: all three methods give the same estimates, and reruns
    // are bit-identical.
    let mut store = ParameterStore::<f64>::new();
    let model = FlowModel::new(&mut store, 2, 2, &FlowConfig::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let traj = generate_dataset(ModelKind::Lgssm { dim: 2 }, Phase::Online, 1, 40, 8)
        .unwrap()
        .remove(0);
    let cfg = OnlineConfig {
        window: 10,
        adam: AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        },
        filter: FilterConfig::new(50, InitialDistribution::StandardNormal(2)),
        standardizer: Standardizer::identity(2, 2),
        snapshot_every: 0,
        checkpoint: None,
    };
    let run = |m| {
        let mut s = store.clone();
        let mut r = ChaCha8Rng::seed_from_u64(99);
        run_online(m, &traj.observations, Some(&traj.states[1..]), &model, &mut s, &cfg, &mut r)
            .unwrap()
            .estimates
    };
    let base = run(OnlineMethod::Frozen);
    if OnlineMethod::ALL.iter().any(|&m| run(m) != base) || run(OnlineMethod::Frozen) != base {
        failures.push("lr = 0 equivalence or determinism".into());
    }

    if failures.is_empty() {
        outcome(
            true,
            "flow round trip, ESS bounds and closed forms, shift invariance, offspring moments, lr = 0 equivalence, determinism",
        )
    } else {
        outcome(false, failures.join("; "))
    }
}

fn back_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn reproduction_path() -> Outcome {
    let full_cfg = ExperimentConfig::full_scale(ModelKind::Tracking);
    let full = full_cfg.seeds.len() == 50
        && full_cfg.online.steps == 5000
        && full_cfg.pretrain.n_traj == 500
        && full_cfg.pretrain.steps == 50
        && full_cfg.particles == 100
        && full_cfg.window == 10
        && full_cfg.lr == 0.005;
    let dir = tempfile::tempdir().unwrap();
    let text = reproduce_all(dir.path(), true, |c| {
        c.seeds = vec![0, 1];
        c.online.steps = 20;
        c.pretrain.n_traj = 4;
        c.pretrain.steps = 10;
        c.pretrain.epochs = 1;
        c.particles = 10;
        c.init = InitMode::Hypercube;
    })
    .unwrap();
    let t1 = std::fs::read_to_string(dir.path().join("table1.txt")).unwrap_or_default();
    let t2 = std::fs::read_to_string(dir.path().join("table2.txt")).unwrap_or_default();
    let shaped = ["lgssm-d2", "lgssm-d5", "lgssm-d10"].iter().all(|l| t1.contains(l))
        && t2.contains("tracking")
        && OnlineMethod::ALL.iter().all(|m| t1.contains(m.label()) && t2.contains(m.label()))
        && text.contains("oracle-dpf lowest");
    outcome(
        full && shaped,
        format!("full-scale defaults {full}; reduced full-scale run wrote both summary tables: {shaped}"),
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name, o: Outcome| {
        println!("[{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };
    report("1 bootstrap filter vs Kalman filter", bootstrap_matches_kalman());
    report("2 evidence estimate unbiased", evidence_is_unbiased());
    report("3 window-loss gradient vs finite differences", gradients_match_finite_differences());
    let lg_dir = tempfile::tempdir().unwrap();
    let (lg, lg_secs) = desk_run(ModelKind::Lgssm { dim: 2 }, lg_dir.path());
    report("4 linear Gaussian adaptation", linear_gaussian_adaptation(&lg, lg_secs));
    report("5 convergence within 1000 steps", convergence_shape(&lg));
    let tr_dir = tempfile::tempdir().unwrap();
    let (tr, tr_secs) = desk_run(ModelKind::Tracking, tr_dir.path());
    report("6 tracking ordering", tracking_ordering(&tr, tr_secs));
    report("7 property re-checks", property_rechecks());
    report("8 full-scale reproduction path", reproduction_path());
    let failed = results.iter().filter(|r| !r.1.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
