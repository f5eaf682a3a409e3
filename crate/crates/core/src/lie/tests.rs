use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

type NumField<'a> = &'a dyn Fn(&[f64]) -> DVector<f64>;

fn numeric(field: &VectorField) -> impl Fn(&[f64]) -> DVector<f64> + '_ {
    move |y| field.eval(y).unwrap()
}

/// Central-difference Jacobian.
fn fd_jacobian(h: NumField, y: &[f64], eps: f64) -> DMatrix<f64> {
    let n = y.len();
    let m = h(y).len();
    let mut j = DMatrix::zeros(m, n);
    for c in 0..n {
        let mut yp = y.to_vec();
        let mut ym = y.to_vec();
        yp[c] += eps;
        ym[c] -= eps;
        j.set_column(c, &((h(&yp) - h(&ym)) / (2.0 * eps)));
    }
    j
}

/// `adᵏ_f g` by nested finite differences of numeric field evaluations.
fn fd_ad(f: NumField, g: NumField, k: usize, y: &[f64]) -> DVector<f64> {
    if k == 0 {
        return g(y);
    }
    let prev = |z: &[f64]| fd_ad(f, g, k - 1, z);
    let eps = 10f64.powi(-2 - k as i32);
    fd_jacobian(&prev, y, eps) * f(y) - fd_jacobian(f, y, 1e-5) * prev(y)
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0))
}

fn random_point(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

#[test]
fn expressions_follow_operator_precedence() {
    let e = Expr::parse("1 + 2*3^2 - -4/2", 1).unwrap();
    assert_eq!(e.eval(&[0.0]), 21.0);
    let e = Expr::parse("-y1^2", 1).unwrap();
    assert_eq!(e.eval(&[3.0]), -9.0);
    let e = Expr::parse("(y1 - y2) * 2.5e-1 / y3", 3).unwrap();
    assert_eq!(e.eval(&[5.0, 1.0, 2.0]), 0.5);
    let e = Expr::parse("relu(y1) + softplus(0) + sqrt(square(y2))", 2).unwrap();
    assert!((e.eval(&[-1.0, -3.0]) - (2f64.ln() + 3.0)).abs() < 1e-15);
    let e = Expr::parse("y1^0", 1).unwrap();
    assert_eq!(e.eval(&[7.0]), 1.0);
}

#[test]
fn malformed_expressions_are_rejected() {
    for (src, n) in [
        ("y4", 3),
        ("y0", 3),
        ("1 +", 1),
        ("(1", 1),
        ("2 $ 3", 1),
        ("y1^1.5", 1),
        ("y1^-1", 1),
        ("foo(1)", 1),
        ("sinh y1", 1),
        ("1 2", 1),
        ("", 1),
    ] {
        assert!(matches!(Expr::parse(src, n), Err(LieError::Parse { .. })), "{src} should fail");
    }
}

#[test]
fn recorded_expression_gradient_matches_finite_differences() {
    let src = "sinh(y1)*y2 + softplus(y2 - y3)^2 / (1 + square(y3)) + asinh(y1*y3) + sqrt(1 + y2^2) \
               + log(2 + cosh(y1)) + sigmoid(y3) - exp(-y1)";
    let e = Expr::parse(src, 3).unwrap();
    let y = [0.3, -0.7, 1.1];
    let jac = crate::ad::jacobian(|g, yn| e.record(g, yn), &y).unwrap();
    let f = |z: &[f64]| DVector::from_element(1, e.eval(z));
    let fd = fd_jacobian(&f, &y, 1e-6);
    for c in 0..3 {
        assert!((jac.get(0, c) - fd[(0, c)]).abs() < 1e-8, "component {c}");
    }
    let mut g = Graph::new();
    let yn = g.input("y", Tensor::row(&y));
    let node = e.record(&mut g, yn).unwrap();
    assert!((g.value(node).item() - e.eval(&y)).abs() < 1e-14);
}

#[test]
fn constant_fields_commute() {
    let f = VectorField::constant(&[1.0, -2.0, 0.5]).unwrap();
    let g = VectorField::parse(&["3", "0", "-1"]).unwrap();
    let b = lie_bracket(&f, &g, &[0.2, 0.4, -0.1]).unwrap();
    assert_eq!(b, DVector::zeros(3));
}

#[test]
fn bracket_matches_hand_computation() {
    // f = (y2, 0), g = (0, 1): ∂g/∂y = 0, ∂f/∂y g = (1, 0), so [f, g] = (−1, 0).
    let f = VectorField::parse(&["y2", "0"]).unwrap();
    let g = VectorField::parse(&["0", "1"]).unwrap();
    for y in [[0.0, 0.0], [1.5, -2.0], [-3.0, 0.25]] {
        let b = lie_bracket(&f, &g, &y).unwrap();
        assert_eq!(b.as_slice(), &[-1.0, 0.0]);
    }
}

#[test]
fn bracket_of_linear_fields_is_the_matrix_commutator() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in 1..=5 {
        for _ in 0..10 {
            let fm = random_matrix(&mut rng, n);
            let gm = random_matrix(&mut rng, n);
            let y = DVector::from_vec(random_point(&mut rng, n));
            let expected = (&gm * &fm - &fm * &gm) * &y;
            let f = VectorField::linear(&fm).unwrap();
            let g = VectorField::linear(&gm).unwrap();
            let b = lie_bracket(&f, &g, y.as_slice()).unwrap();
            assert!((&b - &expected).amax() < 1e-12, "n = {n}: {b} vs {expected}");
            // Same fields written as expressions.
            let text = |m: &DMatrix<f64>| -> Vec<String> {
                (0..n)
                    .map(|r| (0..n).map(|c| format!("({:e})*y{}", m[(r, c)], c + 1)).collect::<Vec<_>>().join(" + "))
                    .collect()
            };
            let (ft, gt) = (text(&fm), text(&gm));
            let fe = VectorField::parse(&ft.iter().map(String::as_str).collect::<Vec<_>>()).unwrap();
            let ge = VectorField::parse(&gt.iter().map(String::as_str).collect::<Vec<_>>()).unwrap();
            let be = lie_bracket(&fe, &ge, y.as_slice()).unwrap();
            assert!((&be - &expected).amax() < 1e-12);
        }
    }
}

#[test]
fn ad_powers_of_linear_pair_are_signed_krylov_vectors() {
    // f = F y, g = b constant: adᵏg = (−F)ᵏ b.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let fm = random_matrix(&mut rng, 4);
    let b: Vec<f64> = random_point(&mut rng, 4);
    let f = VectorField::linear(&fm).unwrap();
    let g = VectorField::constant(&b).unwrap();
    let y = random_point(&mut rng, 4);
    let mut expected = DVector::from_vec(b.clone());
    for k in 0..4 {
        let a = ad_power(&f, &g, k, &y).unwrap();
        assert!((&a - &expected).amax() < 1e-12, "k = {k}");
        expected = -&fm * expected;
    }
    assert_eq!(ad_power(&f, &g, 0, &y).unwrap().as_slice(), b.as_slice());
    let gl = VectorField::linear(&random_matrix(&mut rng, 4)).unwrap();
    let one = ad_power(&f, &gl, 1, &y).unwrap();
    let direct = lie_bracket(&f, &gl, &y).unwrap();
    assert!((one - direct).amax() < 1e-14);
}

#[test]
fn nested_brackets_match_finite_difference_oracle() {
    let f = VectorField::parse(&["sinh(y2) - 0.3*y1*y3", "y3 + softplus(y1)", "-y1 + 0.2*y2^2"]).unwrap();
    let g = VectorField::parse(&["0.1*y2", "cosh(0.5*y1)", "1 + 0.2*y3^2"]).unwrap();
    let (fnum, gnum) = (numeric(&f), numeric(&g));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let y: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for k in 0..=2 {
            let ad = ad_power(&f, &g, k, &y).unwrap();
            let oracle = fd_ad(&fnum, &gnum, k, &y);
            let err = (&ad - &oracle).amax() / (1.0 + oracle.amax());
            assert!(err < 1e-5, "k = {k}: {ad} vs {oracle}");
        }
    }
}

#[test]
fn chain_of_integrators_spans_the_state_space() {
    let sys = InputAffineSystem::fixture("chain3").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let y = random_point(&mut rng, 3);
        let ads: Vec<DVector<f64>> = (0..3).map(|k| ad_power(&sys.f, &sys.g, k, &y).unwrap()).collect();
        assert_eq!(ads[0].as_slice(), &[0.0, 0.0, 1.0]);
        assert_eq!(ads[1].as_slice(), &[0.0, -1.0, 0.0]);
        assert_eq!(ads[2].as_slice(), &[1.0, 0.0, 0.0]);
        let det = DMatrix::from_columns(&ads).determinant();
        assert!((det.abs() - 1.0).abs() < 1e-14);
    }
    let report = check_linearizable(&sys, &SampleBox::symmetric(3, 2.0), &CheckOptions::default()).unwrap();
    assert_eq!(report.verdict, Verdict::Pass);
    assert_eq!(report.samples.len(), 100);
    assert!(report.samples.iter().all(|s| s.rank == 3 && s.max_residual() == 0.0));
}

#[test]
fn controllable_linear_pairs_pass() {
    let sys = InputAffineSystem::fixture("linear3").unwrap();
    let report = check_linearizable(&sys, &SampleBox::symmetric(3, 5.0), &CheckOptions::default()).unwrap();
    assert_eq!(report.verdict, Verdict::Pass);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for n in 2..=5 {
        let fm = random_matrix(&mut rng, n);
        let b = random_point(&mut rng, n);
        // Controllability oracle: Krylov matrix well conditioned.
        let mut cols = vec![DVector::from_vec(b.clone())];
        for k in 1..n {
            cols.push(&fm * &cols[k - 1]);
        }
        let sv = DMatrix::from_columns(&cols).singular_values();
        assert!(sv.min() > 1e-4 * sv.max());
        let sys = InputAffineSystem::new(
            "random-linear",
            VectorField::linear(&fm).unwrap(),
            VectorField::constant(&b).unwrap(),
        )
        .unwrap();
        let opts = CheckOptions { samples: 20, ..CheckOptions::default() };
        let report = check_linearizable(&sys, &SampleBox::symmetric(n, 1.0), &opts).unwrap();
        assert_eq!(report.verdict, Verdict::Pass, "n = {n}");
    }
}

/// Involutivity residual of `{ad⁰g … adⁿ⁻²g}` by nested finite differences
/// and Gram–Schmidt projection.
fn oracle_residuals(f: NumField, g: NumField, y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let k = n - 1;
    let ads: Vec<DVector<f64>> = (0..k).map(|i| fd_ad(f, g, i, y)).collect();
    let jacs: Vec<DMatrix<f64>> = (0..k)
        .map(|i| {
            let h = |z: &[f64]| fd_ad(f, g, i, z);
            fd_jacobian(&h, y, 1e-3)
        })
        .collect();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for a in &ads {
        let mut v = a.clone();
        for q in &basis {
            v -= q * q.dot(&v);
        }
        if v.norm() > 1e-9 {
            basis.push(v.normalize());
        }
    }
    let mut out = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            let mut b = &jacs[j] * &ads[i] - &jacs[i] * &ads[j];
            let scale = jacs[j].norm() * ads[i].norm() + jacs[i].norm() * ads[j].norm();
            for q in &basis {
                b -= q * q.dot(&b);
            }
            out.push(if scale > 0.0 { b.norm() / scale } else { 0.0 });
        }
    }
    out
}

#[test]
fn non_involutive_fixture_fails_only_involutivity() {
    let sys = InputAffineSystem::fixture("non-involutive").unwrap();
    // Hand values: ad¹g = (−2y3, −1, 0), [ad⁰g, ad¹g] = (−2, 0, 0).
    let y = [0.4, -0.3, 0.9];
    let a1 = ad_power(&sys.f, &sys.g, 1, &y).unwrap();
    assert!((a1 - DVector::from_vec(vec![-1.8, -1.0, 0.0])).amax() < 1e-15);
    let a1_field = VectorField::parse(&["-2*y3", "-1", "0"]).unwrap();
    let b = lie_bracket(&sys.g, &a1_field, &y).unwrap();
    assert_eq!(b.as_slice(), &[-2.0, 0.0, 0.0]);

    let report = check_linearizable(&sys, &SampleBox::symmetric(3, 2.0), &CheckOptions::default()).unwrap();
    assert_eq!(report.verdict, Verdict::FailInvolutive);
    let (fnum, gnum) = (numeric(&sys.f), numeric(&sys.g));
    for s in &report.samples {
        assert_eq!(s.rank, 3);
        let oracle = oracle_residuals(&fnum, &gnum, &s.y);
        assert_eq!(oracle.len(), s.involutivity.len());
        for (o, r) in oracle.iter().zip(&s.involutivity) {
            assert!(*o > 1e-2, "oracle residual {o} should be far from zero");
            assert!((o - r.residual).abs() < 1e-5 * (1.0 + o), "{o} vs {}", r.residual);
        }
    }
}

#[test]
fn uncontrollable_fixture_fails_rank() {
    let sys = InputAffineSystem::fixture("uncontrollable").unwrap();
    let report = check_linearizable(&sys, &SampleBox::symmetric(3, 1.0), &CheckOptions::default()).unwrap();
    assert_eq!(report.verdict, Verdict::FailRank);
    assert!(report.samples.iter().all(|s| s.rank == 1));
}

#[test]
fn fixed_seed_gives_identical_reports() {
    let sys = InputAffineSystem::fixture("non-involutive").unwrap();
    let domain = SampleBox { lower: vec![-1.0, 0.0, 2.0], upper: vec![1.0, 0.5, 3.0] };
    let opts = CheckOptions { samples: 25, seed: 42, ..CheckOptions::default() };
    let a = check_linearizable(&sys, &domain, &opts).unwrap();
    let b = check_linearizable(&sys, &domain, &opts).unwrap();
    assert_eq!(a, b);
    for s in &a.samples {
        for (i, v) in s.y.iter().enumerate() {
            assert!(*v >= domain.lower[i] && *v <= domain.upper[i]);
        }
    }
    let c = check_linearizable(&sys, &domain, &CheckOptions { seed: 43, ..opts }).unwrap();
    assert_ne!(a.samples[0].y, c.samples[0].y);
}

fn fixture_reports() -> Vec<CheckReport> {
    InputAffineSystem::FIXTURES
        .iter()
        .map(|name| {
            let sys = InputAffineSystem::fixture(name).unwrap();
            let opts = CheckOptions { samples: 10, ..CheckOptions::default() };
            check_linearizable(&sys, &SampleBox::symmetric(3, 1.5), &opts).unwrap()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tightening_involutivity_tolerance_never_turns_failure_into_pass(
        exp_hi in -16.0f64..1.0,
        shrink in 0.0f64..8.0,
        exp_rank in -12.0f64..-1.0,
    ) {
        let tol_hi = 10f64.powf(exp_hi);
        let tol_lo = tol_hi * 10f64.powf(-shrink);
        let rank_tol = 10f64.powf(exp_rank);
        for report in fixture_reports() {
            let loose = report.verdict_with(rank_tol, tol_hi);
            let tight = report.verdict_with(rank_tol, tol_lo);
            if loose != Verdict::Pass {
                prop_assert_ne!(tight, Verdict::Pass);
            }
        }
    }
}

#[test]
fn report_summary_states_sampling_scope() {
    let sys = InputAffineSystem::fixture("chain3").unwrap();
    let opts = CheckOptions { samples: 3, ..CheckOptions::default() };
    let report = check_linearizable(&sys, &SampleBox::symmetric(3, 1.0), &opts).unwrap();
    let text = report.to_string();
    assert!(text.contains("verdict: pass"));
    assert!(text.contains(SAMPLED_NOTE));
}

#[test]
fn systems_load_from_toml() {
    let text = r#"
        name = "toy"
        f = ["y2 + y3^2", "y3", "0"]
        g = ["0", "0", "1"]

        [domain]
        lower = [-1.0, -1.0, -1.0]
        upper = [1.0, 1.0, 1.0]
    "#;
    let (sys, domain) = InputAffineSystem::from_toml_str(text).unwrap();
    assert_eq!(sys.name, "toy");
    assert_eq!(domain, Some(SampleBox::symmetric(3, 1.0)));
    let y = [0.1, 0.2, 0.3];
    let fixture = InputAffineSystem::fixture("non-involutive").unwrap();
    assert_eq!(sys.f.eval(&y).unwrap(), fixture.f.eval(&y).unwrap());

    let (sys, domain) = InputAffineSystem::from_toml_str("f = [\"y2\", \"0\"]\ng = [\"0\", \"1\"]").unwrap();
    assert_eq!((sys.name.as_str(), domain), ("custom", None));

    for bad in [
        "f = [\"y2\", \"0\"]\ng = [\"1\"]",
        "f = [\"y2\"]\ng = [\"1\"]\nextra = 1",
        "f = [\"y2 +\", \"0\"]\ng = [\"0\", \"1\"]",
        "f = [\"y1\"]\ng = [\"1\"]\n[domain]\nlower = [1.0]\nupper = [0.0]",
        "f = [\"y1\"]",
    ] {
        assert!(InputAffineSystem::from_toml_str(bad).is_err(), "{bad}");
    }
    assert!(matches!(InputAffineSystem::fixture("nope"), Err(LieError::UnknownFixture(_))));
}

#[test]
fn invalid_requests_are_errors() {
    let sys = InputAffineSystem::fixture("chain3").unwrap();
    let opts = CheckOptions { samples: 0, ..CheckOptions::default() };
    assert!(check_linearizable(&sys, &SampleBox::symmetric(3, 1.0), &opts).is_err());
    assert!(check_linearizable(&sys, &SampleBox::symmetric(2, 1.0), &CheckOptions::default()).is_err());
    assert!(lie_bracket(&sys.f, &sys.g, &[0.0, 1.0]).is_err());
    let two = VectorField::parse(&["y1", "y2"]).unwrap();
    assert!(lie_bracket(&sys.f, &two, &[0.0; 3]).is_err());
    assert!(VectorField::linear(&DMatrix::zeros(2, 3)).is_err());
    // log of a negative state is not finite.
    let f = VectorField::parse(&["log(y1)"]).unwrap();
    let g = VectorField::parse(&["1"]).unwrap();
    assert!(matches!(lie_bracket(&f, &g, &[-1.0]), Err(LieError::Ad(AdError::NonFinite { .. }))));
}
