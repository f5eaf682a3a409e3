use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{Architecture, Dims, ELModel, ModelInit, Scalers};
use crate::qp::QpSolver;

fn m1(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

fn small_arch() -> Architecture {
    Architecture { phi_depth: 2, psi_depth: 2, xi_depth: 2, hidden: 6, xi_hidden: 6 }
}

/// Φ = Ψ = identity with a constant linear core.
fn linear_model(dims: Dims, a: &[f64], b: &[f64], c: &[f64]) -> ELModel {
    let mut model = ELModel::new(dims, small_arch(), Scalers::identity(dims), &ModelInit::default(), 1);
    model.set_identity_maps();
    model.set_linear_core(a, b, c);
    model
}

fn random_model(seed: u64) -> ELModel {
    let dims = Dims { n: 3, m: 3, l: 2, p: 2 };
    let init = ModelInit { phi_gain: 0.3, psi_gain: 0.3, linear_gain: 0.2, ..ModelInit::default() };
    ELModel::new(dims, small_arch(), Scalers::identity(dims), &init, seed)
}

fn random_stabilizable(rng: &mut ChaCha8Rng, n: usize, m: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    // Generic random pairs are controllable with probability one.
    let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let b = DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0));
    (a, b)
}

#[test]
fn scalar_riccati_closed_forms() {
    let p = solve_care(&m1(0.0), &m1(1.0), &m1(1.0), &m1(1.0)).unwrap();
    assert!((p[(0, 0)] - 1.0).abs() < 1e-10);
    let p = solve_care(&m1(-1.0), &m1(1.0), &m1(1.0), &m1(1.0)).unwrap();
    assert!((p[(0, 0)] - (2f64.sqrt() - 1.0)).abs() < 1e-10);
    // Unstable scalar: 2P − P² + 1 = 0.
    let p = solve_care(&m1(1.0), &m1(1.0), &m1(1.0), &m1(1.0)).unwrap();
    assert!((p[(0, 0)] - (1.0 + 2f64.sqrt())).abs() < 1e-10);
}

#[test]
fn random_riccati_residual_and_stability() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let n = rng.gen_range(1..=6);
        let m = rng.gen_range(1..=n);
        let (a, b) = random_stabilizable(&mut rng, n, m);
        let q = DMatrix::identity(n, n);
        let r = DMatrix::identity(m, m) * rng.gen_range(0.5..2.0);
        let p = solve_care(&a, &b, &q, &r).unwrap();
        assert!(care_residual(&p, &a, &b, &q, &r) < 1e-8);
        let k = r.clone().try_inverse().unwrap() * b.transpose() * &p;
        assert!(is_hurwitz(&(&a - &b * k)));
        assert!(p.clone().cholesky().is_some());
    }
}

#[test]
fn uncontrollable_marginal_mode_has_no_stabilizing_solution() {
    let err = solve_care(&m1(0.0), &m1(0.0), &m1(1.0), &m1(1.0)).unwrap_err();
    assert!(matches!(err, ControlError::NoStabilizingSolution(_)), "{err}");
    let err = solve_care(&m1(1.0), &m1(0.0), &m1(1.0), &m1(1.0)).unwrap_err();
    assert!(matches!(err, ControlError::NoStabilizingSolution(_)), "{err}");
}

#[test]
fn lyapunov_solution_satisfies_equation() {
    let a = DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, 0.0, -3.0]);
    let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    let x = solve_lyapunov(&a, &m).unwrap();
    assert!((a.transpose() * &x + &x * &a + &m).amax() < 1e-12);
}

#[test]
fn steady_targets_by_hand() {
    let dims = Dims { n: 2, m: 2, l: 1, p: 1 };
    let model = linear_model(dims, &[-1.0, 0.0, 0.0, -1.0], &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0]);
    let t = steady_target(&model, &[1.0, 2.0], &[0.0], 1e-6).unwrap();
    assert!((t.x_d[0] - 1.0).abs() < 1e-12 && (t.x_d[1] - 2.0).abs() < 1e-12);
    assert!((t.u_d[0] - 1.0).abs() < 1e-12 && (t.u_d[1] - 2.0).abs() < 1e-12);
    let model = linear_model(dims, &[-1.0, 0.0, 0.0, -1.0], &[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0]);
    let t = steady_target(&model, &[0.0, 0.0], &[0.0], 1e-6).unwrap();
    assert!((t.u_d[0] + 1.0).abs() < 1e-12 && t.u_d[1].abs() < 1e-12);
}

#[test]
fn unreachable_target_reports_residual() {
    let dims = Dims { n: 2, m: 1, l: 1, p: 1 };
    let model = linear_model(dims, &[-1.0, 0.0, 0.0, -1.0], &[1.0, 0.0], &[0.0, 0.0]);
    match steady_target(&model, &[0.0, 1.0], &[0.0], 1e-6) {
        Err(ControlError::TargetNotRealizable { residual }) => assert!((residual - 1.0).abs() < 1e-12),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn random_square_input_target_is_exact() {
    for seed in 0..5 {
        let model = random_model(seed);
        let t = steady_target(&model, &[0.3, -0.2, 0.5], &[0.1, -0.4], 1e-6).unwrap();
        let (a, b, c) = core_matrices(&model.linear_at(&[0.1, -0.4]).unwrap());
        // Independent check: solve B u = −(A x_d + c) by LU.
        let u = b.lu().solve(&-(&a * &t.x_d + &c)).unwrap();
        assert!((u - &t.u_d).amax() < 1e-10);
        assert!(t.residual < 1e-10);
    }
}

#[test]
fn lqr_law_values() {
    let d = LqrDesign::new(m1(0.0), m1(1.0), DVector::zeros(1), m1(1.0), m1(1.0), DVector::zeros(1), DVector::zeros(1))
        .unwrap();
    assert!((d.k[(0, 0)] - 1.0).abs() < 1e-10);
    let u = lqr_control(&d, &DVector::from_element(1, 2.0));
    assert!((u[0] + 2.0).abs() < 1e-10);
    assert_eq!(d.control(&d.x_d), d.u_d);
}

#[test]
fn lqr_closed_loop_converges_to_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..5 {
        let (a, b) = random_stabilizable(&mut rng, 3, 2);
        let x_d = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
        let u_d = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
        // Offset that makes the random target an equilibrium.
        let c = -(&a * &x_d + &b * &u_d);
        let d = LqrDesign::new(
            a.clone(),
            b.clone(),
            c.clone(),
            DMatrix::identity(3, 3),
            DMatrix::identity(2, 2),
            x_d.clone(),
            u_d,
        )
        .unwrap();
        let horizon = 20.0 / d.abscissa.abs();
        let steps = 4000;
        let h = horizon / steps as f64;
        let mut x = DVector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0));
        let f = |x: &DVector<f64>| d.xdot(x, &d.control(x));
        for _ in 0..steps {
            let k1 = f(&x);
            let k2 = f(&(&x + &k1 * (h / 2.0)));
            let k3 = f(&(&x + &k2 * (h / 2.0)));
            let k4 = f(&(&x + &k3 * h));
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        assert!((&x - &x_d).norm() < 1e-4);
    }
}

fn unit_alpha() -> Alpha {
    Alpha { k1: 1.0, k2: 0.0 }
}

#[test]
fn cbf_filter_examples() {
    // f = 0, g = 1, h = x − 1, α(s) = s, k = 1: constraint u ≤ 1 − x.
    let run = |x: f64| {
        cbf_qp(
            &DVector::zeros(1),
            &m1(1.0),
            &[x - 1.0],
            &m1(1.0),
            &[unit_alpha()],
            &DVector::from_element(1, 1.0),
            None,
        )
        .unwrap()
    };
    let s = run(-1.0);
    assert!((s.u[0] - 1.0).abs() < 1e-14 && s.qp.active.is_empty());
    let s = run(0.5);
    assert!((s.u[0] - 0.5).abs() < 1e-14 && s.qp.kkt_residual < 1e-12);
    let s = run(0.0);
    assert!((s.u[0] - 1.0).abs() < 1e-14);
}

#[test]
fn cbf_filter_respects_box_and_reports_infeasibility() {
    let lo = DVector::from_element(1, -0.2);
    let hi = DVector::from_element(1, 0.3);
    let s = cbf_qp(
        &DVector::zeros(1),
        &m1(1.0),
        &[-1.0],
        &m1(1.0),
        &[unit_alpha()],
        &DVector::from_element(1, 1.0),
        Some((&lo, &hi)),
    )
    .unwrap();
    assert!((s.u[0] - 0.3).abs() < 1e-14);
    // u ≤ 1 − x with x = 2 forces u ≤ −1, below the box.
    let err = cbf_qp(
        &DVector::zeros(1),
        &m1(1.0),
        &[1.0],
        &m1(1.0),
        &[unit_alpha()],
        &DVector::from_element(1, 0.0),
        Some((&lo, &hi)),
    )
    .unwrap_err();
    match err {
        ControlError::Infeasible { barriers, .. } => assert_eq!(barriers, vec![1.0]),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn icbf_scalar_toy() {
    // f = 0, g = 1, k(x) = −x, a = 1, h = u − 1, α(s) = s.
    let program = |x: f64, u: f64| {
        let be = BarrierEval { h: DVector::from_element(1, u - 1.0), dh_dx: m1(0.0), dh_du: m1(1.0) };
        let e = DVector::from_element(1, u + x);
        assemble_icbf(1.0, &e, &m1(-1.0), &DVector::from_element(1, u), &be, &[unit_alpha()]).0
    };
    let s = crate::qp::solve(&program(0.0, 0.0)).unwrap();
    assert!(s.lambda[0].abs() < 1e-15);
    let s = crate::qp::solve(&program(-2.0, 0.0)).unwrap();
    assert!((s.lambda[0] - 1.0).abs() < 1e-14);
    assert_eq!(s.active, vec![0]);
}

fn loose_spec(model: &ELModel) -> BarrierSpec {
    let d = model.dims;
    BarrierSpec {
        z_max: vec![1e3; d.p],
        v_min: vec![-50.0; d.m],
        v_max: vec![50.0; d.m],
        alpha: vec![Alpha::default()],
        a: 0.5,
        margin: 0.0,
    }
}

#[test]
fn icbf_at_reference_law_is_stationary() {
    let model = random_model(4);
    let d_bar = [0.2, -0.1];
    let design = LqrDesign::for_model(&model, &[0.1, 0.2, -0.1], &d_bar, &LqrWeights::default(), 1e-6).unwrap();
    let y = [0.3, -0.1, 0.2];
    let x = DVector::from_vec(model.x_from_y(&y, &d_bar).unwrap());
    let state = ControllerState { u: design.control(&x), t: 0.0 };
    let mut solver = QpSolver::new();
    let step = icbf_step(&model, &state, &y, &d_bar, &design, &loose_spec(&model), 1e-3, &mut solver).unwrap();
    assert!(step.h.iter().all(|&h| h < 0.0));
    assert!(step.lambda.amax() < 1e-12);
    assert_eq!(step.state.u, state.u);
    let back = model.u_from_v(&step.v, &y, &d_bar).unwrap();
    assert!((DVector::from_vec(back) - &state.u).amax() < 1e-9);
}

#[test]
fn icbf_objective_matches_time_derivative_expansion() {
    let model = random_model(6);
    let d_bar = [0.1, 0.3];
    let design = LqrDesign::for_model(&model, &[0.2, 0.0, -0.3], &d_bar, &LqrWeights::default(), 1e-6).unwrap();
    let spec = loose_spec(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut sample = |k: usize| DVector::from_fn(k, |_, _| rng.gen_range(-1.0..1.0));
    for _ in 0..1000 {
        let (x, u, lambda) = (sample(3), sample(3), sample(3));
        let prob = icbf_problem(&model, &design, &spec, &x, &u, &d_bar).unwrap();
        // d/dt ‖u − k(x)‖² along (ẋ, λ) by a central difference in time;
        // exact for the affine k and quadratic norm up to rounding.
        let xdot = design.xdot(&x, &u);
        let eps = 1e-3;
        let cost = |s: f64| (&u + &lambda * s - design.control(&(&x + &xdot * s))).norm_squared();
        let ddt = (cost(eps) - cost(-eps)) / (2.0 * eps);
        let oracle = ddt + spec.a * lambda.norm_squared();
        let got = prob.objective(&lambda);
        assert!((got - oracle).abs() < 1e-10 * (1.0 + oracle.abs()), "{got} vs {oracle}");
    }
}

#[test]
fn barrier_jacobians_match_finite_differences() {
    let model = random_model(2);
    let spec = BarrierSpec {
        z_max: vec![0.5, -0.2],
        v_min: vec![-1.0, -0.5, -2.0],
        v_max: vec![1.0, 0.7, 2.0],
        alpha: vec![Alpha::default()],
        a: 1.0,
        margin: 0.0,
    };
    let d = [0.4, -0.3];
    let x = [0.2, -0.5, 0.1];
    let u = [0.3, 0.1, -0.2];
    let be = barrier(&model, &spec, &x, &u, &d).unwrap();
    let num = barrier_values(&model, &spec, &x, &u, &d).unwrap();
    assert!(be.h.iter().zip(&num).all(|(a, b)| (a - b).abs() < 1e-10));
    let h = 1e-6;
    for j in 0..3 {
        let mut xp = x;
        let mut xm = x;
        xp[j] += h;
        xm[j] -= h;
        let (fp, fm) =
            (barrier_values(&model, &spec, &xp, &u, &d).unwrap(), barrier_values(&model, &spec, &xm, &u, &d).unwrap());
        let mut up = u;
        let mut um = u;
        up[j] += h;
        um[j] -= h;
        let (gp, gm) =
            (barrier_values(&model, &spec, &x, &up, &d).unwrap(), barrier_values(&model, &spec, &x, &um, &d).unwrap());
        for i in 0..spec.rows() {
            assert!((be.dh_dx[(i, j)] - (fp[i] - fm[i]) / (2.0 * h)).abs() < 1e-6);
            assert!((be.dh_du[(i, j)] - (gp[i] - gm[i]) / (2.0 * h)).abs() < 1e-6);
        }
    }
    // Input rows are affine in u with unit slope.
    for i in 0..3 {
        assert_eq!(be.dh_du[(2 + i, i)], 1.0);
        assert_eq!(be.dh_du[(5 + i, i)], -1.0);
    }
}

#[test]
fn barrier_spec_validation() {
    let model = random_model(0);
    let mut spec = loose_spec(&model);
    assert!(spec.validate(2, 3).is_ok());
    spec.alpha = vec![Alpha { k1: 1.0, k2: 0.0 }];
    assert!(spec.validate(2, 3).is_err());
    spec.alpha = vec![Alpha::default(); 4];
    assert!(spec.validate(2, 3).is_err());
    let mut spec = loose_spec(&model);
    spec.a = 0.0;
    assert!(spec.validate(2, 3).is_err());
    let mut spec = loose_spec(&model);
    spec.v_min[0] = 60.0;
    assert!(spec.validate(2, 3).is_err());
}

#[test]
fn clf_values_by_hand() {
    let dims = Dims { n: 2, m: 2, l: 1, p: 1 };
    let model = linear_model(dims, &[-1.0, 0.0, 0.0, -1.0], &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0]);
    let mut design = LqrDesign::for_model(&model, &[0.0, 0.0], &[0.0], &LqrWeights::default(), 1e-6).unwrap();
    design.p = DMatrix::identity(2, 2);
    assert!((clf_value(&model, &design, &[1.0, 2.0]).unwrap() - 5.0).abs() < 1e-12);
    assert_eq!(clf_value(&model, &design, &[0.0, 0.0]).unwrap(), 0.0);
}

#[test]
fn sontag_formula_branches() {
    assert_eq!(sontag_control(3.0, &DVector::zeros(2)), DVector::zeros(2));
    let u = sontag_control(0.0, &DVector::from_element(1, 2.0));
    assert!((u[0] + 2.0).abs() < 1e-15);
}

#[test]
fn sontag_decreases_scalar_lyapunov_function() {
    // ẏ = y + v with V = P y², P = 1 + √2.
    let p = 1.0 + 2f64.sqrt();
    for i in 0..=1000 {
        let y = -5.0 + 0.01 * i as f64;
        if y.abs() < 1e-12 {
            continue;
        }
        let lfv = 2.0 * p * y * y;
        let lgv = DVector::from_element(1, 2.0 * p * y);
        let v = sontag_control(lfv, &lgv)[0];
        let vdot = 2.0 * p * y * (y + v);
        assert!(vdot < 0.0, "y = {y}: V̇ = {vdot}");
    }
}

#[test]
fn kkt_residual_examples() {
    // Unconstrained: u = k, inactive row.
    let r = kkt_from_parts(&DVector::zeros(1), &DVector::from_element(1, -0.5), &m1(1.0));
    assert!(r.residual < 1e-15 && r.mu[0] == 0.0);
    // k = 2, h = u − 1 active at u = 1: μ = 2.
    let r = kkt_from_parts(&DVector::from_element(1, -1.0), &DVector::from_element(1, 0.0), &m1(1.0));
    assert!(r.residual < 1e-12);
    assert!((r.mu[0] - 2.0).abs() < 1e-12);
}

#[test]
fn kkt_rejects_infeasible_points() {
    let dims = Dims { n: 1, m: 1, l: 1, p: 1 };
    let model = linear_model(dims, &[-1.0], &[1.0], &[0.0]);
    let design = LqrDesign::for_model(&model, &[0.0], &[0.0], &LqrWeights::default(), 1e-6).unwrap();
    let spec = BarrierSpec {
        z_max: vec![1e3],
        v_min: vec![-1.0],
        v_max: vec![1.0],
        alpha: vec![Alpha::default()],
        a: 1.0,
        margin: 0.0,
    };
    let err = equilibrium_kkt_residual(
        &model,
        &design,
        &spec,
        &DVector::zeros(1),
        &DVector::from_element(1, 2.0),
        &[0.0],
        1e-9,
    )
    .unwrap_err();
    assert!(matches!(err, ControlError::NotInFeasibleSet { row: 1, .. }), "{err}");
}

/// All subsets of columns as the passive set; keeps the best nonnegative
/// least-squares fit.
fn nnls_oracle(a: &DMatrix<f64>, b: &DVector<f64>) -> f64 {
    let n = a.ncols();
    let mut best = b.norm();
    for mask in 1u32..(1 << n) {
        let idx: Vec<usize> = (0..n).filter(|j| mask & (1 << j) != 0).collect();
        let sub = DMatrix::from_fn(a.nrows(), idx.len(), |i, k| a[(i, idx[k])]);
        let Ok(s) = sub.clone().svd(true, true).solve(b, 1e-14) else {
            continue;
        };
        if s.iter().all(|&v| v >= 0.0) {
            best = best.min((sub * s - b).norm());
        }
    }
    best
}

#[test]
fn nnls_matches_subset_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let rows = rng.gen_range(1..8);
        let cols = rng.gen_range(1..7);
        let a = DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0));
        let b = DVector::from_fn(rows, |_, _| rng.gen_range(-1.0..1.0));
        let mu = nnls(&a, &b);
        assert!(mu.iter().all(|&v| v >= 0.0));
        let got = (&a * &mu - &b).norm();
        assert!(got <= nnls_oracle(&a, &b) + 1e-10);
    }
}
