use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::autodiff::{ParamId, ParameterStore, Tape, Tensor, Var};
use crate::error::Error;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

fn randomize(store: &mut ParameterStore<f64>, ids: &[ParamId], amp: f64, rng: &mut ChaCha8Rng) {
    for &id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = rng.random_range(-amp..amp);
        }
    }
}

fn random_rows(n: usize, d: usize, sd: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let data = (0..n * d).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_vec(n, d, data).unwrap()
}

fn stack_forward(
    flow: &FlowStack,
    store: &ParameterStore<f64>,
    x: &Tensor<f64>,
    cond: Option<&Tensor<f64>>,
) -> (Tensor<f64>, Tensor<f64>) {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let cv = cond.map(|c| tape.constant(c.clone()));
    let (y, ld) = flow.forward(&mut tape, store, xv, cv).unwrap();
    (tape.value(y).clone(), tape.value(ld).clone())
}

fn stack_inverse(
    flow: &FlowStack,
    store: &ParameterStore<f64>,
    y: &Tensor<f64>,
    cond: Option<&Tensor<f64>>,
) -> (Tensor<f64>, Tensor<f64>) {
    let mut tape = Tape::new();
    let yv = tape.constant(y.clone());
    let cv = cond.map(|c| tape.constant(c.clone()));
    let (x, ld) = flow.inverse(&mut tape, store, yv, cv).unwrap();
    (tape.value(x).clone(), tape.value(ld).clone())
}

/// Determinant of the central-difference Jacobian of the flow at one point.
fn numerical_jacobian_det(
    flow: &FlowStack,
    store: &ParameterStore<f64>,
    x: &[f64],
    cond: Option<&Tensor<f64>>,
) -> f64 {
    let d = x.len();
    let h = 1e-6;
    let mut jac = DMatrix::<f64>::zeros(d, d);
    for j in 0..d {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let (yp, _) = stack_forward(flow, store, &Tensor::row(&xp), cond);
        let (ym, _) = stack_forward(flow, store, &Tensor::row(&xm), cond);
        for i in 0..d {
            jac[(i, j)] = (yp.data()[i] - ym.data()[i]) / (2.0 * h);
        }
    }
    jac.determinant()
}

fn random_stack(
    dim: usize,
    cond_dim: usize,
    seed: u64,
) -> (ParameterStore<f64>, FlowStack, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let flow = FlowStack::new(&mut store, "f", dim, cond_dim, &FlowConfig::default(), &mut rng).unwrap();
    let ids = flow.param_ids();
    randomize(&mut store, &ids, 0.3, &mut rng);
    (store, flow, rng)
}

#[test]
fn zero_initialised_coupling_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParameterStore::new();
    let flow = FlowStack::new(&mut store, "f", 3, 2, &FlowConfig::default(), &mut rng).unwrap();
    let x = random_rows(5, 3, 1.0, &mut rng);
    let c = random_rows(5, 2, 1.0, &mut rng);
    let (y, ld) = stack_forward(&flow, &store, &x, Some(&c));
    assert_eq!(y, x);
    assert!(ld.data().iter().all(|&v| v == 0.0));
    let (back, ld_inv) = stack_inverse(&flow, &store, &x, Some(&c));
    assert_eq!(back, x);
    assert!(ld_inv.data().iter().all(|&v| v == 0.0));
}

#[test]
fn one_dimensional_coupling_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParameterStore::new();
    let layer = AffineCoupling::new(&mut store, "c", 1, &[0], 1, 8, 5.0, &mut rng).unwrap();
    let (s, t) = (0.7, -1.3);
    store.value_mut(store.id("c.scale.b1").unwrap()).fill(s);
    store.value_mut(store.id("c.shift.b1").unwrap()).fill(t);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::column(&[2.0, -0.5]));
    let c = tape.constant(Tensor::column(&[0.1, 0.9]));
    let (y, ld) = layer.forward(&mut tape, &store, x, Some(c)).unwrap();
    for (k, &xv) in [2.0, -0.5].iter().enumerate() {
        assert!((tape.value(y).data()[k] - (xv * f64::exp(s) + t)).abs() < 1e-14);
        assert!((tape.value(ld).data()[k] - s).abs() < 1e-15);
    }
}

#[test]
fn scale_outputs_are_clamped() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParameterStore::new();
    let layer = AffineCoupling::new(&mut store, "c", 1, &[0], 1, 4, 5.0, &mut rng).unwrap();
    store.value_mut(store.id("c.scale.b1").unwrap()).fill(40.0);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::column(&[1.0]));
    let c = tape.constant(Tensor::column(&[0.0]));
    let (y, ld) = layer.forward(&mut tape, &store, x, Some(c)).unwrap();
    assert_eq!(tape.value(ld).item(), 5.0);
    assert!((tape.value(y).item() - f64::exp(5.0)).abs() < 1e-9);
}

#[test]
fn random_layer_logdet_matches_numerical_jacobian() {
    for (dim, cond_dim, seed) in [(2, 0, 3), (3, 2, 4), (5, 1, 5), (4, 0, 6), (1, 2, 7)] {
        let (store, flow, mut rng) = random_stack(dim, cond_dim, seed);
        for _ in 0..5 {
            let x = random_rows(1, dim, 1.0, &mut rng);
            let c = random_rows(1, cond_dim, 1.0, &mut rng);
            let cond = (cond_dim > 0).then_some(&c);
            let (_, ld) = stack_forward(&flow, &store, &x, cond);
            let det = numerical_jacobian_det(&flow, &store, x.data(), cond);
            let analytic = ld.item().exp();
            assert!(
                ((det - analytic) / analytic).abs() < 1e-5,
                "d={dim}: numerical {det} vs analytic {analytic}"
            );
        }
    }
}

#[test]
fn round_trip_on_a_thousand_points() {
    let (store, flow, mut rng) = random_stack(4, 3, 8);
    let x = random_rows(1000, 4, 2.0, &mut rng);
    let c = random_rows(1000, 3, 1.0, &mut rng);
    let (y, ld_f) = stack_forward(&flow, &store, &x, Some(&c));
    let (back, ld_i) = stack_inverse(&flow, &store, &y, Some(&c));
    for (a, b) in x.data().iter().zip(back.data()) {
        assert!((a - b).abs() < 1e-8);
    }
    for (f, i) in ld_f.data().iter().zip(ld_i.data()) {
        assert!((f + i).abs() < 1e-12);
    }
}

#[test]
fn non_finite_input_reports_index() {
    let (store, flow, _) = random_stack(2, 0, 9);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::row(&[0.0, f64::NAN]));
    let err = flow.forward(&mut tape, &store, x, None).unwrap_err();
    assert!(matches!(err, Error::NonFinite { index: 1, .. }), "{err}");
    let y = tape.constant(Tensor::row(&[f64::INFINITY, 0.0]));
    assert!(matches!(
        flow.inverse(&mut tape, &store, y, None),
        Err(Error::NonFinite { index: 0, .. })
    ));
}

#[test]
fn elementwise_affine_for_unconditioned_scalars() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParameterStore::new();
    let flow = FlowStack::new(&mut store, "f", 1, 0, &FlowConfig::default(), &mut rng).unwrap();
    assert!(matches!(flow.layers(), [FlowLayer::Elementwise(_)]));
    store.value_mut(store.id("f.affine.log_scale").unwrap()).fill(f64::ln(3.0));
    store.value_mut(store.id("f.affine.shift").unwrap()).fill(1.0);
    let (y, ld) = stack_forward(&flow, &store, &Tensor::column(&[2.0, -1.0]), None);
    assert!((y.data()[0] - 7.0).abs() < 1e-12 && (y.data()[1] + 2.0).abs() < 1e-12);
    assert!(ld.data().iter().all(|&v| (v - f64::ln(3.0)).abs() < 1e-15));
}

fn dynamic_model(dim: usize, seed: u64, random: bool) -> (ParameterStore<f64>, DynamicModel, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let model = DynamicModel::new(&mut store, "dyn", dim, &FlowConfig::default(), &mut rng).unwrap();
    if random {
        let ids = model.param_ids();
        randomize(&mut store, &ids, 0.3, &mut rng);
    }
    (store, model, rng)
}

#[test]
fn dynamic_identity_flow_is_reparameterised_gaussian() {
    let (store, model, mut rng) = dynamic_model(3, 11, false);
    let prev = random_rows(4, 3, 1.0, &mut rng);
    let noise = random_rows(4, 3, 1.0, &mut rng);
    let mut tape = Tape::new();
    let p = tape.constant(prev.clone());
    let n = tape.constant(noise.clone());
    let s = model.sample(&mut tape, &store, p, n).unwrap();
    for k in 0..12 {
        let expect = prev.data()[k] + noise.data()[k];
        assert!((tape.value(s.value).data()[k] - expect).abs() < 1e-15);
    }
    let zero = tape.constant(Tensor::zeros(4, 3));
    let s0 = model.sample(&mut tape, &store, p, zero).unwrap();
    assert_eq!(tape.value(s0.value), &prev);
}

#[test]
fn dynamic_sample_density_matches_inverse_path() {
    let (store, model, mut rng) = dynamic_model(3, 12, true);
    let prev = random_rows(50, 3, 1.0, &mut rng);
    let noise = random_rows(50, 3, 1.0, &mut rng);
    let mut tape = Tape::new();
    let p = tape.constant(prev);
    let n = tape.constant(noise);
    let s = model.sample(&mut tape, &store, p, n).unwrap();
    let dens = model.log_density(&mut tape, &store, s.value, p).unwrap();
    for (a, b) in tape
        .value(s.density.log_density)
        .data()
        .iter()
        .zip(tape.value(dens.log_density).data())
    {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn dynamic_standard_normal_at_mode() {
    let (mut store, model, _) = dynamic_model(1, 13, false);
    store.value_mut(model.transition_id()).fill(0.0);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::scalar(0.0));
    let prev = tape.constant(Tensor::scalar(4.2));
    let d = model.log_density(&mut tape, &store, x, prev).unwrap();
    assert!((tape.item(d.log_density) + LN_SQRT_2PI).abs() < 1e-15);
}

/// Trapezoid rule of `exp(log f)` on a uniform grid.
fn quadrature(lo: f64, hi: f64, n: usize, log_f: impl Fn(&Tensor<f64>) -> Tensor<f64>) -> f64 {
    let h = (hi - lo) / (n - 1) as f64;
    let grid: Vec<f64> = (0..n).map(|k| lo + h * k as f64).collect();
    let vals = log_f(&Tensor::column(&grid));
    let f: Vec<f64> = vals.data().iter().map(|v| v.exp()).collect();
    h * (f.iter().sum::<f64>() - 0.5 * (f[0] + f[n - 1]))
}

#[test]
fn dynamic_density_integrates_to_one_in_1d() {
    let (store, model, _) = dynamic_model(1, 14, true);
    let total = quadrature(-30.0, 30.0, 20_001, |grid| {
        let mut tape = Tape::new();
        let x = tape.constant(grid.clone());
        let prev = tape.constant(Tensor::repeat_row(&[0.8], grid.rows()));
        let d = model.log_density(&mut tape, &store, x, prev).unwrap();
        tape.value(d.log_density).clone()
    });
    assert!((total - 1.0).abs() < 1e-3, "{total}");
}

#[test]
fn identity_coupling_layer_leaves_density_unchanged() {
    let (store, model, mut rng) = dynamic_model(2, 15, true);
    let mut store2 = store.clone();
    let mut extended = model.clone();
    let extra = AffineCoupling::new(&mut store2, "extra", 2, &[1], 0, 8, 5.0, &mut rng).unwrap();
    extended.flow_mut().push(FlowLayer::Coupling(extra));
    let x = random_rows(10, 2, 1.0, &mut rng);
    let prev = random_rows(10, 2, 1.0, &mut rng);
    let eval = |m: &DynamicModel, s: &ParameterStore<f64>| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pv = tape.constant(prev.clone());
        let d = m.log_density(&mut tape, s, xv, pv).unwrap();
        tape.value(d.log_density).clone()
    };
    assert_eq!(eval(&model, &store), eval(&extended, &store2));
}

fn proposal_model(
    state_dim: usize,
    obs_dim: usize,
    seed: u64,
) -> (ParameterStore<f64>, ProposalModel, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let model = ProposalModel::new(&mut store, "prop", state_dim, obs_dim, &FlowConfig::default(), &mut rng)
        .unwrap();
    (store, model, rng)
}

#[test]
fn proposal_reduces_to_base_gaussian() {
    let (mut store, model, mut rng) = proposal_model(2, 2, 16);
    // Cut every path from y into the base network.
    let w0 = store.id("prop.base.w0").unwrap();
    for r in 2..4 {
        for c in 0..32 {
            store.value_mut(w0).set(r, c, 0.0);
        }
    }
    let prev = random_rows(6, 2, 1.0, &mut rng);
    let noise = random_rows(6, 2, 1.0, &mut rng);
    let run = |y: &[f64]| {
        let mut tape = Tape::new();
        let p = tape.constant(prev.clone());
        let yv = tape.constant(Tensor::repeat_row(y, 6));
        let n = tape.constant(noise.clone());
        let s = model.sample(&mut tape, &store, p, yv, n).unwrap();
        (
            tape.value(s.value).clone(),
            tape.value(s.density.log_density).clone(),
            tape.value(s.density.logdet).clone(),
        )
    };
    let (x1, lq1, ld1) = run(&[0.3, -2.0]);
    let (x2, lq2, _) = run(&[5.0, 1.0]);
    assert_eq!(x1, x2);
    assert_eq!(lq1, lq2);
    assert!(ld1.data().iter().all(|&v| v == 0.0));
    // Gaussian density by hand from the network's mean and std.
    let mut tape = Tape::new();
    let p = tape.constant(prev.clone());
    let yv = tape.constant(Tensor::repeat_row(&[0.0, 0.0], 6));
    let input = tape.concat_cols(&[p, yv]).unwrap();
    let out = model.base_net().forward(&mut tape, &store, input).unwrap();
    let out = tape.value(out).clone();
    for r in 0..6 {
        let mut lp = 0.0;
        for c in 0..2 {
            let (mu, ls) = (out.get(r, c), out.get(r, c + 2).clamp(-5.0, 5.0));
            let x = x1.get(r, c);
            assert!((x - (mu + ls.exp() * noise.get(r, c))).abs() < 1e-14);
            lp += -0.5 * ((x - mu) / ls.exp()).powi(2) - ls - LN_SQRT_2PI;
        }
        assert!((lq1.data()[r] - lp).abs() < 1e-12);
    }
}

#[test]
fn proposal_density_consistent_via_inverse_path() {
    let (mut store, model, mut rng) = proposal_model(3, 2, 17);
    let ids = model.param_ids();
    randomize(&mut store, &ids, 0.3, &mut rng);
    let prev = random_rows(40, 3, 1.0, &mut rng);
    let noise = random_rows(40, 3, 1.0, &mut rng);
    let y = random_rows(1, 2, 1.0, &mut rng);
    let mut tape = Tape::new();
    let p = tape.constant(prev);
    let yv = tape.constant(Tensor::repeat_row(y.data(), 40));
    let n = tape.constant(noise);
    let s = model.sample(&mut tape, &store, p, yv, n).unwrap();
    let d = model.log_density(&mut tape, &store, s.value, p, yv).unwrap();
    for (a, b) in tape
        .value(s.density.log_density)
        .data()
        .iter()
        .zip(tape.value(d.log_density).data())
    {
        assert!((a - b).abs() < 1e-8);
    }
}

#[test]
fn proposal_samples_depend_on_observation() {
    let (mut store, model, mut rng) = proposal_model(2, 2, 18);
    let ids = model.param_ids();
    randomize(&mut store, &ids, 0.3, &mut rng);
    let prev = random_rows(3, 2, 1.0, &mut rng);
    let noise = random_rows(3, 2, 1.0, &mut rng);
    let run = |y: &[f64]| {
        let mut tape = Tape::new();
        let p = tape.constant(prev.clone());
        let yv = tape.constant(Tensor::repeat_row(y, 3));
        let n = tape.constant(noise.clone());
        let s = model.sample(&mut tape, &store, p, yv, n).unwrap();
        tape.value(s.value).clone()
    };
    assert_ne!(run(&[0.0, 0.0]), run(&[1.0, -1.0]));
}

fn measurement_model(obs_dim: usize, state_dim: usize, seed: u64, random: bool) -> (ParameterStore<f64>, MeasurementModel, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let model =
        MeasurementModel::new(&mut store, "obs", obs_dim, state_dim, &FlowConfig::default(), &mut rng).unwrap();
    if random {
        let ids = model.param_ids();
        randomize(&mut store, &ids, 0.3, &mut rng);
    }
    (store, model, rng)
}

#[test]
fn identity_measurement_is_standard_normal() {
    let (store, model, mut rng) = measurement_model(2, 3, 19, false);
    let y = random_rows(5, 2, 1.0, &mut rng);
    let x = random_rows(5, 3, 1.0, &mut rng);
    let mut tape = Tape::new();
    let yv = tape.constant(y.clone());
    let xv = tape.constant(x);
    let d = model.log_likelihood(&mut tape, &store, yv, xv).unwrap();
    for r in 0..5 {
        let expect: f64 = y.row_slice(r).iter().map(|v| -0.5 * v * v - LN_SQRT_2PI).sum();
        assert!((tape.value(d.log_density).data()[r] - expect).abs() < 1e-14);
    }
}

#[test]
fn measurement_likelihood_integrates_to_one_in_1d() {
    let (store, model, mut rng) = measurement_model(1, 2, 20, true);
    for _ in 0..3 {
        let x = random_rows(1, 2, 1.0, &mut rng);
        let total = quadrature(-40.0, 40.0, 40_001, |grid| {
            let mut tape = Tape::new();
            let yv = tape.constant(grid.clone());
            let xv = tape.constant(Tensor::repeat_row(x.data(), grid.rows()));
            let d = model.log_likelihood(&mut tape, &store, yv, xv).unwrap();
            tape.value(d.log_density).clone()
        });
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }
}

#[test]
fn measurement_sample_inverts_likelihood_path() {
    let (store, model, mut rng) = measurement_model(2, 2, 21, true);
    let x = random_rows(20, 2, 1.0, &mut rng);
    let z = random_rows(20, 2, 1.0, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let zv = tape.constant(z.clone());
    let y = model.sample(&mut tape, &store, xv, zv).unwrap();
    let d = model.log_likelihood(&mut tape, &store, y, xv).unwrap();
    // log p(y|x) = log p_Z(z) − log|det J_G(z)|, with z recovered exactly.
    for r in 0..20 {
        let pz: f64 = z.row_slice(r).iter().map(|v| -0.5 * v * v - LN_SQRT_2PI).sum();
        assert!((tape.value(d.base).data()[r] - pz).abs() < 1e-9);
    }
}

#[test]
fn measurement_parameter_gradients_match_finite_differences() {
    let (mut store, model, mut rng) = measurement_model(2, 3, 22, true);
    let y = random_rows(4, 2, 1.0, &mut rng);
    let x = random_rows(4, 3, 1.0, &mut rng);
    let loss = |s: &ParameterStore<f64>| -> (Tape<f64>, Var) {
        let mut tape = Tape::new();
        let yv = tape.constant(y.clone());
        let xv = tape.constant(x.clone());
        let d = model.log_likelihood(&mut tape, s, yv, xv).unwrap();
        let total = tape.sum(d.log_density);
        (tape, total)
    };
    let (tape, root) = loss(&store);
    store.zero_grads();
    tape.backward(root, &mut store).unwrap();
    let analytic = store.flatten_grads();
    let numeric = crate::oracle::finite_diff_grad(
        |s| {
            let (t, r) = loss(s);
            t.item(r)
        },
        &mut store,
        1e-5,
    );
    for (a, n) in analytic.iter().zip(&numeric) {
        assert!((a - n).abs() <= 1e-4 * a.abs().max(n.abs()) + 1e-7, "{a} vs {n}");
    }
}

/// Importance-sampling estimate of `∫ exp(log_f)` over ℝ² with a wide
/// Gaussian envelope; returns `(mean, standard error)`.
fn monte_carlo_mass(
    n: usize,
    centre: [f64; 2],
    sd: f64,
    rng: &mut ChaCha8Rng,
    log_f: impl Fn(&Tensor<f64>) -> Tensor<f64>,
) -> (f64, f64) {
    let chunk = 50_000;
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..n / chunk {
        let mut pts = random_rows(chunk, 2, sd, rng);
        let mut log_env = vec![0.0; chunk];
        for r in 0..chunk {
            let (a, b) = (pts.get(r, 0), pts.get(r, 1));
            log_env[r] = -0.5 * (a * a + b * b) / (sd * sd) - 2.0 * (sd.ln() + LN_SQRT_2PI);
            pts.set(r, 0, a + centre[0]);
            pts.set(r, 1, b + centre[1]);
        }
        let lf = log_f(&pts);
        for (l, e) in lf.data().iter().zip(&log_env) {
            let w = (l - e).exp();
            s1 += w;
            s2 += w * w;
        }
    }
    let mean = s1 / n as f64;
    let var = s2 / n as f64 - mean * mean;
    (mean, (var / n as f64).sqrt())
}

#[test]
fn densities_normalise_in_2d_by_monte_carlo() {
    let n = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(23);

    let (store, dynamic, _) = dynamic_model(2, 24, true);
    let prev = [0.4, -0.2];
    let mut tape = Tape::new();
    let pv = tape.constant(Tensor::row(&prev));
    let centre = {
        let z = tape.constant(Tensor::zeros(1, 2));
        let s = dynamic.sample(&mut tape, &store, pv, z).unwrap();
        let v = tape.value(s.value);
        [v.get(0, 0), v.get(0, 1)]
    };
    let (m, se) = monte_carlo_mass(n, centre, 4.0, &mut rng, |pts| {
        let mut tape = Tape::new();
        let x = tape.constant(pts.clone());
        let p = tape.constant(Tensor::repeat_row(&prev, pts.rows()));
        let d = dynamic.log_density(&mut tape, &store, x, p).unwrap();
        tape.value(d.log_density).clone()
    });
    assert!((m - 1.0).abs() < 3.0 * se, "dynamic: {m} ± {se}");

    let (mut pstore, proposal, mut prng) = proposal_model(2, 2, 25);
    let ids = proposal.param_ids();
    randomize(&mut pstore, &ids, 0.3, &mut prng);
    let y = [0.5, 1.0];
    let (m, se) = monte_carlo_mass(n, [0.0, 0.0], 5.0, &mut rng, |pts| {
        let mut tape = Tape::new();
        let x = tape.constant(pts.clone());
        let p = tape.constant(Tensor::repeat_row(&prev, pts.rows()));
        let yv = tape.constant(Tensor::repeat_row(&y, pts.rows()));
        let d = proposal.log_density(&mut tape, &pstore, x, p, yv).unwrap();
        tape.value(d.log_density).clone()
    });
    assert!((m - 1.0).abs() < 3.0 * se, "proposal: {m} ± {se}");

    let (mstore, measurement, _) = measurement_model(2, 2, 26, true);
    let (m, se) = monte_carlo_mass(n, [0.0, 0.0], 4.0, &mut rng, |pts| {
        let mut tape = Tape::new();
        let yv = tape.constant(pts.clone());
        let x = tape.constant(Tensor::repeat_row(&prev, pts.rows()));
        let d = measurement.log_likelihood(&mut tape, &mstore, yv, x).unwrap();
        tape.value(d.log_density).clone()
    });
    assert!((m - 1.0).abs() < 3.0 * se, "measurement: {m} ± {se}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn stacks_invert_for_random_parameters(dim in 1usize..6, cond_dim in 0usize..3, seed in any::<u64>()) {
        let (store, flow, mut rng) = random_stack(dim, cond_dim, seed);
        let x = random_rows(16, dim, 2.0, &mut rng);
        let c = random_rows(16, cond_dim, 1.0, &mut rng);
        let cond = (cond_dim > 0).then_some(&c);
        let (y, _) = stack_forward(&flow, &store, &x, cond);
        let (back, _) = stack_inverse(&flow, &store, &y, cond);
        for (a, b) in x.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn logdet_matches_numerical_jacobian(dim in 1usize..6, cond_dim in 0usize..3, seed in any::<u64>()) {
        let (store, flow, mut rng) = random_stack(dim, cond_dim, seed);
        let x = random_rows(1, dim, 1.0, &mut rng);
        let c = random_rows(1, cond_dim, 1.0, &mut rng);
        let cond = (cond_dim > 0).then_some(&c);
        let (_, ld) = stack_forward(&flow, &store, &x, cond);
        let det = numerical_jacobian_det(&flow, &store, x.data(), cond);
        let analytic = ld.item().exp();
        prop_assert!(((det - analytic) / analytic).abs() < 1e-5, "{} vs {}", det, analytic);
    }
}
