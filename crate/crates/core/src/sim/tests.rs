use proptest::prelude::*;

use super::*;
use crate::ad::Tensor;
use crate::control::{clf_value, BarrierSpec, LqrDesign, LqrWeights};
use crate::model::{Architecture, Dims, ELModel, ModelInit, Scalers};

fn scalar_dims() -> Dims {
    Dims { n: 1, m: 1, l: 1, p: 1 }
}

/// `ẏ = a y + b v` with identity outputs.
fn scalar_plant(a: f64, b: f64, half_width: f64) -> FnPlant {
    FnPlant::new(scalar_dims(), move |y, v, _, _| vec![a * y[0] + b * v[0]], |y, _, _| vec![y[0]], half_width)
}

/// Φ = Ψ = identity with a constant linear core.
fn linear_model(dims: Dims, a: &[f64], b: &[f64], c: &[f64]) -> ELModel {
    let arch = Architecture { phi_depth: 2, psi_depth: 2, xi_depth: 2, hidden: 4, xi_hidden: 4 };
    let mut model = ELModel::new(dims, arch, Scalers::identity(dims), &ModelInit::default(), 3);
    model.set_identity_maps();
    model.set_linear_core(a, b, c);
    model
}

fn wp(t: f64, value: &[f64]) -> Waypoint {
    Waypoint { t, value: value.to_vec() }
}

fn scenario(controller: ControllerKind, horizon: f64, target: &[f64], l: usize) -> Scenario {
    Scenario {
        controller,
        horizon,
        control_period: 0.001,
        substeps: 4,
        seed: 0,
        y0: None,
        v0: None,
        targets: vec![wp(0.0, target)],
        target_interpolation: Interpolation::Hold,
        disturbances: vec![wp(0.0, &vec![0.0; l])],
        weights: LqrWeights::default(),
        barrier: None,
        target_tolerance: 1e-9,
        d_grid: 0.0,
        measurement_noise: 0.0,
        safety_factor: 10.0,
    }
}

// ----- signals -----

#[test]
fn zero_amplitude_sines_sit_at_the_box_midpoint() {
    let exc = Excitation::SumOfSines { f_min: 0.1, f_max: 2.0, components: 4, amplitude: 0.0 };
    let s = gen_excitation(&exc, 10.0, 0.01, &[0.0, -2.0], &[100.0, 6.0], 5).unwrap();
    for k in 0..100 {
        let t = 0.1 * k as f64;
        assert_eq!(s.value(t), vec![50.0, 2.0]);
        assert_eq!(s.rate(t), vec![0.0, 0.0]);
    }
}

#[test]
fn prbs_uses_only_the_box_endpoints_and_both_of_them() {
    let (lo, hi) = ([0.0, -1.0], [100.0, 3.0]);
    let s = gen_excitation(&Excitation::Prbs { hold: 0.05 }, 20.0, 0.01, &lo, &hi, 9).unwrap();
    let mut seen = [[false; 2]; 2];
    for k in 0..2000 {
        let v = s.value(0.01 * k as f64);
        for c in 0..2 {
            assert!(v[c] == lo[c] || v[c] == hi[c], "{v:?}");
            seen[c][usize::from(v[c] == hi[c])] = true;
        }
    }
    assert_eq!(seen, [[true; 2]; 2]);
}

#[test]
fn excitations_stay_inside_the_box() {
    let (lo, hi) = ([0.0, 10.0], [100.0, 12.0]);
    for exc in [
        Excitation::Chirp { f_min: 0.05, f_max: 3.0, amplitude: 1.0 },
        Excitation::SumOfSines { f_min: 0.05, f_max: 3.0, components: 6, amplitude: 1.0 },
    ] {
        let s = gen_excitation(&exc, 30.0, 0.01, &lo, &hi, 2).unwrap();
        for k in 0..3000 {
            let v = s.value(0.01 * k as f64);
            for c in 0..2 {
                assert!(v[c] >= lo[c] - 1e-12 && v[c] <= hi[c] + 1e-12, "{exc:?} {v:?}");
            }
        }
    }
}

#[test]
fn chirp_spectrum_peaks_inside_its_band() {
    let (f_min, f_max, duration, period) = (1.0, 4.0, 20.0, 0.01);
    let exc = Excitation::Chirp { f_min, f_max, amplitude: 1.0 };
    let s = gen_excitation(&exc, duration, period, &[-1.0], &[1.0], 4).unwrap();
    let count = (duration / period) as usize;
    let x: Vec<f64> = (0..count).map(|k| s.value(k as f64 * period)[0]).collect();
    // Plain DFT magnitude on the bins up to 10 Hz.
    let df = 1.0 / duration;
    let mut best = (0.0, 0.0);
    for bin in 1..(10.0 / df) as usize {
        let f = bin as f64 * df;
        let (mut re, mut im) = (0.0, 0.0);
        for (k, v) in x.iter().enumerate() {
            let w = 2.0 * std::f64::consts::PI * f * k as f64 * period;
            re += v * w.cos();
            im -= v * w.sin();
        }
        let mag = re.hypot(im);
        if mag > best.1 {
            best = (f, mag);
        }
    }
    assert!(best.0 >= f_min && best.0 <= f_max, "peak at {} Hz", best.0);
}

#[test]
fn excitation_is_deterministic_in_the_seed() {
    let exc = Excitation::SumOfSines { f_min: 0.1, f_max: 2.0, components: 3, amplitude: 0.8 };
    let a = gen_excitation(&exc, 5.0, 0.01, &[0.0], &[1.0], 11).unwrap().sample(0.0, 0.01, 500);
    let b = gen_excitation(&exc, 5.0, 0.01, &[0.0], &[1.0], 11).unwrap().sample(0.0, 0.01, 500);
    let c = gen_excitation(&exc, 5.0, 0.01, &[0.0], &[1.0], 12).unwrap().sample(0.0, 0.01, 500);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn invalid_excitation_requests_are_rejected() {
    let chirp = |f_min, f_max, amplitude| Excitation::Chirp { f_min, f_max, amplitude };
    assert!(gen_excitation(&chirp(0.0, 1.0, 0.5), 1.0, 0.01, &[0.0], &[1.0], 0).is_err());
    assert!(gen_excitation(&chirp(2.0, 1.0, 0.5), 1.0, 0.01, &[0.0], &[1.0], 0).is_err());
    assert!(gen_excitation(&chirp(0.1, 1.0, 1.5), 1.0, 0.01, &[0.0], &[1.0], 0).is_err());
    assert!(gen_excitation(&chirp(0.1, 1.0, 0.5), 1.0, 0.01, &[1.0], &[0.0], 0).is_err());
    assert!(gen_excitation(&Excitation::Prbs { hold: 0.0 }, 1.0, 0.01, &[0.0], &[1.0], 0).is_err());
    assert!(Signal::steps(vec![1.0, 0.0], vec![vec![0.0], vec![1.0]]).is_err());
}

#[test]
fn ramps_interpolate_with_exact_rates_and_allow_jumps() {
    let s = Signal::ramps(vec![0.0, 2.0, 2.0, 3.0], vec![vec![0.0], vec![4.0], vec![10.0], vec![11.0]]).unwrap();
    assert_eq!(s.value(-1.0), vec![0.0]);
    assert_eq!(s.value(1.0), vec![2.0]);
    assert_eq!(s.rate(1.0), vec![2.0]);
    assert_eq!(s.value(2.0), vec![10.0]);
    assert_eq!(s.value(2.5), vec![10.5]);
    assert_eq!(s.rate(2.5), vec![1.0]);
    assert_eq!(s.value(7.0), vec![11.0]);
    assert_eq!(s.rate(7.0), vec![0.0]);
}

proptest! {
    #[test]
    fn signal_rates_match_central_differences(seed in 0u64..1000, t in 0.1f64..9.0) {
        let exc = Excitation::Chirp { f_min: 0.1, f_max: 1.5, amplitude: 0.9 };
        let s = gen_excitation(&exc, 10.0, 0.01, &[-2.0, 0.0], &[2.0, 5.0], seed).unwrap();
        let h = 1e-5;
        let (a, b) = (s.value(t + h), s.value(t - h));
        for (c, r) in s.rate(t).iter().enumerate() {
            let fd = (a[c] - b[c]) / (2.0 * h);
            prop_assert!((fd - r).abs() < 1e-5 * (1.0 + r.abs()), "{fd} vs {r}");
        }
    }
}

// ----- open loop -----

#[test]
fn zero_dynamics_give_a_constant_trajectory() {
    let plant = scalar_plant(0.0, 0.0, 10.0);
    let sim = simulate_open_loop(
        &plant,
        &Signal::Constant(vec![3.0]),
        &Signal::Constant(vec![0.0]),
        &[1.25],
        0.01,
        100,
        &OpenLoopOptions::default(),
    )
    .unwrap();
    assert_eq!(sim.len(), 101);
    assert!((0..101).all(|r| sim.y.get(r, 0) == 1.25 && sim.ydot.get(r, 0) == 0.0));
    assert!((sim.t[100] - 1.0).abs() < 1e-12);
}

#[test]
fn exponential_decay_matches_the_closed_form() {
    let plant = scalar_plant(-1.0, 0.0, 10.0);
    let sim = simulate_open_loop(
        &plant,
        &Signal::Constant(vec![0.0]),
        &Signal::Constant(vec![0.0]),
        &[1.0],
        1e-3,
        1000,
        &OpenLoopOptions::default(),
    )
    .unwrap();
    assert!((sim.y.get(1000, 0) - (-1.0f64).exp()).abs() < 1e-9);
    sim.validate().unwrap();
}

#[test]
fn integrator_converges_at_fourth_order() {
    // ẏ = −y + v·cos(y) has no closed form; compare against a fine reference.
    let plant = FnPlant::new(scalar_dims(), |y, v, _, _| vec![-y[0] + v[0] * y[0].cos()], |y, _, _| vec![y[0]], 10.0);
    let run = |substeps: usize| -> f64 {
        let opts = OpenLoopOptions { substeps, ..OpenLoopOptions::default() };
        let v = Signal::Constant(vec![2.0]);
        let d = Signal::Constant(vec![0.0]);
        simulate_open_loop(&plant, &v, &d, &[0.3], 0.5, 4, &opts).unwrap().y.get(4, 0)
    };
    let reference = run(4096);
    let (e1, e2) = ((run(2) - reference).abs(), (run(4) - reference).abs());
    let order = (e1 / e2).log2();
    assert!(order >= 3.8, "observed order {order} ({e1:e}, {e2:e})");
}

#[test]
fn divergence_is_reported() {
    let plant = scalar_plant(1.0, 0.0, 1.0);
    let err = simulate_open_loop(
        &plant,
        &Signal::Constant(vec![0.0]),
        &Signal::Constant(vec![0.0]),
        &[0.5],
        0.1,
        100,
        &OpenLoopOptions::default(),
    )
    .unwrap_err();
    match err {
        SimError::Diverged { t, y } => {
            assert!(t > 2.0 && t < 4.0, "{t}");
            assert!(y[0] > 10.0);
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn open_loop_rejects_bad_requests() {
    let plant = scalar_plant(-1.0, 1.0, 10.0);
    let c0 = Signal::Constant(vec![0.0]);
    let jump = Signal::steps(vec![0.0, 1.0], vec![vec![0.0], vec![1.0]]).unwrap();
    let opts = OpenLoopOptions::default();
    assert!(simulate_open_loop(&plant, &c0, &jump, &[0.0], 0.1, 20, &opts).is_err());
    assert!(simulate_open_loop(&plant, &c0, &c0, &[0.0], 0.0, 20, &opts).is_err());
    assert!(simulate_open_loop(&plant, &c0, &c0, &[0.0, 1.0], 0.1, 20, &opts).is_err());
    let zero = OpenLoopOptions { substeps: 0, ..opts };
    assert!(simulate_open_loop(&plant, &c0, &c0, &[0.0], 0.1, 20, &zero).is_err());
}

#[test]
fn teacher_data_passes_dataset_validation() {
    let cfg = TeacherConfig::default();
    let plant = ModelPlant::teacher(&cfg).unwrap();
    let exc = Excitation::SumOfSines { f_min: 0.05, f_max: 1.0, components: 4, amplitude: 0.8 };
    let v = gen_excitation(&exc, 20.0, 0.02, &[0.0; 3], &[100.0; 3], 1).unwrap();
    let d = gen_excitation(&exc, 20.0, 0.02, &[-1.0; 2], &[1.0; 2], 2).unwrap();
    let y0 = vec![0.0; 3];
    let data = simulate_open_loop(&plant, &v, &d, &y0, 0.02, 1000, &OpenLoopOptions::default()).unwrap();
    data.validate().unwrap();
    assert_eq!(data.dims(), cfg.dims());

    // Replaying the record reproduces it up to the interpolation of d.
    let (y, z) = free_run(&plant, &data, 1).unwrap();
    let r2y = r2_columns(&y, &data.y).unwrap();
    let r2z = r2_columns(&z, &data.z).unwrap();
    assert!(r2y.iter().chain(&r2z).all(|r| *r > 0.999), "{r2y:?} {r2z:?}");
}

#[test]
fn prbs_data_widens_the_derivative_tolerance() {
    let plant = scalar_plant(-1.0, 1.0, 10.0);
    let v = gen_excitation(&Excitation::Prbs { hold: 0.2 }, 10.0, 0.1, &[-1.0], &[1.0], 3).unwrap();
    let data =
        simulate_open_loop(&plant, &v, &Signal::Constant(vec![0.0]), &[0.0], 0.1, 100, &OpenLoopOptions::default())
            .unwrap();
    assert!(data.meta.derivative_tolerance > 0.05);
    data.validate().unwrap();
}

#[test]
fn nonlinear_plant_stays_bounded_under_extreme_inputs() {
    let plant = NonlinearPlant;
    let v = gen_excitation(&Excitation::Prbs { hold: 0.5 }, 60.0, 0.01, &[0.0; 3], &[100.0; 3], 8).unwrap();
    let d = gen_excitation(
        &Excitation::SumOfSines { f_min: 0.05, f_max: 0.5, components: 3, amplitude: 1.0 },
        60.0,
        0.01,
        &[-1.0; 2],
        &[1.0; 2],
        9,
    )
    .unwrap();
    let opts = OpenLoopOptions { substeps: 2, safety_factor: 1.0 };
    let data = simulate_open_loop(&plant, &v, &d, &[0.0; 3], 0.01, 6000, &opts).unwrap();
    assert!(data.y.data().iter().all(|y| y.abs() < 5.0));
    data.validate().unwrap();
}

// ----- metrics -----

#[test]
fn r2_matches_hand_values() {
    assert!((r2(&[1.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap() - 0.5).abs() < 1e-15);
    assert_eq!(r2(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
    assert_eq!(r2(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
    assert!(r2(&[1.0, 1.0], &[2.0, 2.0]).is_err());
    assert!(r2(&[1.0], &[2.0]).is_err());
    assert!(r2(&[1.0, 2.0], &[2.0, 3.0, 4.0]).is_err());
    assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
    let a = Tensor::new(3, 2, vec![1.0, 0.0, 2.0, 1.0, 3.0, 2.0]);
    assert_eq!(r2_columns(&a, &a).unwrap(), vec![1.0, 1.0]);
}

// ----- closed loop -----

#[test]
fn lqr_drives_a_linear_plant_to_its_target() {
    let dims = Dims { n: 2, m: 2, l: 1, p: 1 };
    let (a, b, c) = ([0.0, 1.0, -1.0, -0.5], [1.0, 0.0, 0.0, 1.0], [0.2, 0.0]);
    let model = linear_model(dims, &a, &b, &c);
    let plant = ModelPlant::new(model.clone(), vec![-10.0; 2], vec![10.0; 2]).unwrap();
    let mut sc = scenario(ControllerKind::Lqr, 15.0, &[1.0, -0.5], 1);
    sc.y0 = Some(vec![-1.0, 2.0]);
    let trace = simulate_closed_loop(&plant, &model, &sc).unwrap();
    assert_eq!(trace.rows.len(), 15000);
    let last = trace.rows.last().unwrap();
    let err = last.y.iter().zip(&last.y_d).map(|(y, d)| (y - d).abs()).fold(0.0, f64::max);
    assert!(err < 1e-4, "final error {err}");
    assert!(trace.rows[0].h.is_empty());
}

#[test]
fn zero_horizon_gives_an_empty_trace() {
    let model = linear_model(scalar_dims(), &[-1.0], &[1.0], &[0.0]);
    let plant = ModelPlant::new(model.clone(), vec![-1.0], vec![1.0]).unwrap();
    let trace = simulate_closed_loop(&plant, &model, &scenario(ControllerKind::Lqr, 0.0, &[0.0], 1)).unwrap();
    assert!(trace.rows.is_empty());
    let mut out = Vec::new();
    trace.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 1);
}

#[test]
fn trace_csv_has_commented_metadata_and_one_line_per_row() {
    let model = linear_model(scalar_dims(), &[-1.0], &[1.0], &[0.0]);
    let plant = ModelPlant::new(model.clone(), vec![-1.0], vec![1.0]).unwrap();
    let mut sc = scenario(ControllerKind::Lqr, 0.01, &[0.5], 1);
    sc.seed = 42;
    let trace = simulate_closed_loop(&plant, &model, &sc).unwrap();
    let mut out = Vec::new();
    trace.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.contains("# controller = lqr"));
    assert!(text.contains("# seed = 42"));
    let body: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(body.len(), 11);
    assert_eq!(body[0], trace.columns().join(","));
    assert_eq!(body[0].split(',').count(), body[1].split(',').count());
}

#[test]
fn failures_carry_the_partial_trace() {
    // The controller believes the plant is stable; the plant is not.
    let model = linear_model(scalar_dims(), &[-1.0], &[1.0], &[0.0]);
    let plant = scalar_plant(30.0, 1.0, 1.0);
    let mut sc = scenario(ControllerKind::Lqr, 5.0, &[0.0], 1);
    sc.y0 = Some(vec![0.1]);
    match simulate_closed_loop(&plant, &model, &sc).unwrap_err() {
        SimError::Interrupted { t, source, trace } => {
            assert!(matches!(*source, SimError::Diverged { .. }));
            assert!(!trace.rows.is_empty() && trace.rows.len() < 5000);
            assert!((trace.rows.last().unwrap().t - t).abs() < 1e-12);
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn closed_loop_rejects_inconsistent_scenarios() {
    let model = linear_model(scalar_dims(), &[-1.0], &[1.0], &[0.0]);
    let plant = ModelPlant::new(model.clone(), vec![-1.0], vec![1.0]).unwrap();
    let bad_target = scenario(ControllerKind::Lqr, 1.0, &[0.0, 1.0], 1);
    assert!(simulate_closed_loop(&plant, &model, &bad_target).is_err());
    let no_barrier = scenario(ControllerKind::Icbf, 1.0, &[0.0], 1);
    assert!(simulate_closed_loop(&plant, &model, &no_barrier).is_err());
    let mut no_targets = scenario(ControllerKind::Lqr, 1.0, &[0.0], 1);
    no_targets.targets.clear();
    assert!(simulate_closed_loop(&plant, &model, &no_targets).is_err());
    let other = NonlinearPlant;
    assert!(simulate_closed_loop(&other, &model, &scenario(ControllerKind::Lqr, 1.0, &[0.0], 1)).is_err());
}

#[test]
fn sontag_law_decreases_the_lyapunov_function_on_a_scalar_plant() {
    // ẏ = y + v with Q = R = 1: P = 1 + √2.
    let model = linear_model(scalar_dims(), &[1.0], &[1.0], &[0.0]);
    let plant = ModelPlant::new(model.clone(), vec![-5.0], vec![5.0]).unwrap();
    let mut sc = scenario(ControllerKind::Sontag, 3.0, &[0.0], 1);
    sc.y0 = Some(vec![2.0]);
    let trace = simulate_closed_loop(&plant, &model, &sc).unwrap();
    let design = LqrDesign::for_model(&model, &[0.0], &[0.0], &LqrWeights::default(), 1e-9).unwrap();
    assert!((design.p[(0, 0)] - (1.0 + 2f64.sqrt())).abs() < 1e-10);
    let v: Vec<f64> = trace.rows.iter().map(|r| clf_value(&model, &design, &r.y).unwrap()).collect();
    assert!(v.windows(2).all(|w| w[1] < w[0] || w[0] == 0.0));
    assert!(*v.last().unwrap() < 1e-6 * v[0]);
}

#[test]
fn icbf_keeps_an_input_bound_that_lqr_exceeds() {
    let dims = scalar_dims();
    let model = linear_model(dims, &[-1.0], &[1.0], &[0.0]);
    let plant = ModelPlant::new(model.clone(), vec![-10.0], vec![10.0]).unwrap();
    let spec = BarrierSpec {
        z_max: vec![1e3],
        v_min: vec![-1.0],
        v_max: vec![1.0],
        alpha: vec![crate::control::Alpha { k1: 50.0, k2: 1.0 }],
        a: 0.01,
        margin: 1e-4,
    };
    let mut sc = scenario(ControllerKind::Lqr, 8.0, &[0.0], 1);
    sc.targets = vec![wp(0.0, &[0.0]), wp(0.5, &[0.8])];
    sc.barrier = Some(spec);
    let lqr = simulate_closed_loop(&plant, &model, &sc).unwrap();
    assert!(lqr.max_h() > 0.0);
    sc.controller = ControllerKind::Icbf;
    let icbf = simulate_closed_loop(&plant, &model, &sc).unwrap();
    assert!(icbf.max_h() <= 0.0, "{}", icbf.max_h());
    assert!(icbf.rows.iter().all(|r| r.v[0] <= 1.0 && r.v[0] >= -1.0));
    let last = icbf.rows.last().unwrap();
    assert!((last.y[0] - 0.8).abs() < 1e-3, "{:?}", last.y);
}

#[test]
fn measurement_noise_is_reproducible() {
    let model = linear_model(scalar_dims(), &[-1.0], &[1.0], &[0.0]);
    let plant = ModelPlant::new(model.clone(), vec![-5.0], vec![5.0]).unwrap();
    let mut sc = scenario(ControllerKind::Lqr, 0.5, &[0.3], 1);
    sc.measurement_noise = 0.01;
    sc.seed = 5;
    let a = simulate_closed_loop(&plant, &model, &sc).unwrap();
    let b = simulate_closed_loop(&plant, &model, &sc).unwrap();
    assert_eq!(a, b);
    sc.seed = 6;
    let c = simulate_closed_loop(&plant, &model, &sc).unwrap();
    assert_ne!(a.rows, c.rows);
}

#[test]
fn bundled_standard_scenario_is_consistent() {
    let cfg = ClosedLoopConfig::standard();
    let plant = cfg.plant.build().unwrap();
    cfg.scenario.validate(plant.dims()).unwrap();
    assert_eq!(cfg.scenario.control_period, 0.001);
    assert!(cfg.scenario.barrier.is_some());
    let text = toml::to_string(&cfg).unwrap();
    let back: ClosedLoopConfig = toml::from_str(&text).unwrap();
    assert_eq!(back, cfg);
    assert!(toml::from_str::<ClosedLoopConfig>(&format!("{STANDARD_SCENARIO_TOML}\nextra = 1\n")).is_err());
}

#[test]
fn teacher_plant_matches_its_model() {
    let plant = ModelPlant::teacher(&TeacherConfig::default()).unwrap();
    let model = plant.model();
    let (y, v, d, dd) = ([0.3, -0.2, 1.0], [20.0, 55.0, 80.0], [0.4, -0.1], [0.2, 0.0]);
    let rate = plant.derivative(&y, &v, &d, &dd).unwrap();
    let expect = model.predict_ydot(&v, &y, &d, &dd).unwrap();
    for (a, b) in rate.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12, "{rate:?} vs {expect:?}");
    }
    // The cached context is refreshed when d changes.
    let d2 = [0.9, 0.9];
    let rate2 = plant.derivative(&y, &v, &d2, &dd).unwrap();
    let expect2 = model.predict_ydot(&v, &y, &d2, &dd).unwrap();
    assert!(rate2.iter().zip(&expect2).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn hold_segments_follow_the_target_schedule() {
    let std = ClosedLoopConfig::standard().scenario;
    let segs: Vec<(f64, f64)> = hold_segments(&std).iter().map(|s| (s.0, s.1)).collect();
    assert_eq!(segs, vec![(0.0, 6.0), (7.0, 14.0), (15.0, 24.0)]);

    let mut sc = scenario(ControllerKind::Lqr, 5.0, &[0.0], 1);
    sc.targets = vec![wp(0.0, &[1.0]), wp(2.0, &[1.0]), wp(3.0, &[2.0]), wp(9.0, &[0.0])];
    let segs = hold_segments(&sc);
    assert_eq!(segs.len(), 2);
    assert_eq!((segs[0].0, segs[0].1, segs[0].2.clone()), (0.0, 3.0, vec![1.0]));
    assert_eq!((segs[1].0, segs[1].1, segs[1].2.clone()), (3.0, 5.0, vec![2.0]));
}

#[test]
fn segment_summary_flags_infeasible_targets() {
    let model = linear_model(scalar_dims(), &[-1.0], &[1.0], &[0.0]);
    let plant = ModelPlant::new(model.clone(), vec![-10.0], vec![10.0]).unwrap();
    let mut sc = scenario(ControllerKind::Lqr, 4.0, &[0.0], 1);
    sc.targets = vec![wp(0.0, &[0.5]), wp(2.0, &[3.0])];
    sc.barrier = Some(BarrierSpec {
        z_max: vec![1e3],
        v_min: vec![-1.0],
        v_max: vec![1.0],
        alpha: vec![crate::control::Alpha::default()],
        a: 0.1,
        margin: 0.0,
    });
    let trace = simulate_closed_loop(&plant, &model, &sc).unwrap();
    let segs = tracking_segments(&trace, &sc, &model).unwrap();
    assert_eq!(segs.len(), 2);
    assert_eq!(segs[0].unconstrained, Some(true));
    assert!(segs[0].rmse < 1e-9, "{}", segs[0].rmse);
    assert_eq!(segs[1].unconstrained, Some(false));
    assert!(segs[1].rmse > 0.1);
}
