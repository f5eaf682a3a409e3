use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_problem(rng: &mut ChaCha8Rng, m: usize, r: usize) -> QpProblem {
    let a = DMatrix::from_fn(m, m, |_, _| rng.gen_range(-1.0..1.0));
    let h = &a * a.transpose() + DMatrix::identity(m, m) * 0.1;
    let q = DVector::from_fn(m, |_, _| rng.gen_range(-2.0..2.0));
    let g = DMatrix::from_fn(r, m, |_, _| rng.gen_range(-1.0..1.0));
    // Feasible by construction around a random point.
    let center = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
    let w = &g * &center + DVector::from_fn(r, |_, _| rng.gen_range(0.0..0.5));
    QpProblem::new(h, q, g, w)
}

/// Tries every subset of constraints as the active set and keeps the one
/// whose equality-constrained solution is primal and dual feasible. The
/// subproblem is solved in range space, independently of the solver's
/// KKT route.
fn brute_force(p: &QpProblem) -> DVector<f64> {
    let m = p.vars();
    let r = p.rows();
    let hinv = p.h.clone().try_inverse().unwrap();
    let free = -&hinv * &p.q;
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << r) {
        let set: Vec<usize> = (0..r).filter(|i| mask & (1 << i) != 0).collect();
        if set.len() > m {
            continue;
        }
        let ga = DMatrix::from_fn(set.len(), m, |i, j| p.g[(set[i], j)]);
        let wa = DVector::from_fn(set.len(), |i, _| p.w[set[i]]);
        let (lambda, mu) = if set.is_empty() {
            (free.clone(), DVector::zeros(0))
        } else {
            let s = &ga * &hinv * ga.transpose();
            let svd = s.clone().svd(false, false);
            if svd.singular_values.min() < 1e-10 * svd.singular_values.max() {
                continue;
            }
            let mu = s.try_inverse().unwrap() * (&ga * &free - &wa);
            (&free - &hinv * ga.transpose() * &mu, mu)
        };
        if mu.iter().any(|&v| v < -1e-10) {
            continue;
        }
        if (&p.g * &lambda - &p.w).iter().any(|&v| v > 1e-10) {
            continue;
        }
        let f = p.objective(&lambda);
        if best.as_ref().is_none_or(|(b, _)| f < *b) {
            best = Some((f, lambda));
        }
    }
    best.expect("feasible problem has an optimal active set").1
}

#[test]
fn zero_linear_term_with_origin_feasible() {
    let p = QpProblem::new(
        DMatrix::identity(2, 2) * 3.0,
        DVector::zeros(2),
        DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 2.0]),
        DVector::from_row_slice(&[0.0, 1.0]),
    );
    let s = solve(&p).unwrap();
    assert!(s.is_solved());
    assert_eq!(s.lambda, DVector::zeros(2));
    assert_eq!(s.mu, DVector::zeros(2));
}

#[test]
fn unconstrained_minimizer() {
    let p = QpProblem::unconstrained(DMatrix::identity(2, 2) * 2.0, DVector::from_row_slice(&[-2.0, 0.0]));
    let s = solve(&p).unwrap();
    assert!((s.lambda[0] - 1.0).abs() < 1e-15 && s.lambda[1].abs() < 1e-15);
    assert_eq!(s.mu.len(), 0);
}

#[test]
fn single_active_bound() {
    // min λ² s.t. λ ≤ −1: λ* = −1, stationarity 2λ + μ = 0 gives μ = 2.
    let p = QpProblem::new(
        DMatrix::from_element(1, 1, 2.0),
        DVector::zeros(1),
        DMatrix::from_element(1, 1, 1.0),
        DVector::from_element(1, -1.0),
    );
    let s = solve(&p).unwrap();
    assert!((s.lambda[0] + 1.0).abs() < 1e-14);
    assert!((s.mu[0] - 2.0).abs() < 1e-14);
    assert_eq!(s.active, vec![0]);
    assert!(s.kkt_residual < 1e-14);
}

#[test]
fn infeasible_problem_yields_farkas_certificate() {
    // λ ≤ −1 and −λ ≤ −1 (λ ≥ 1).
    let p = QpProblem::new(
        DMatrix::from_element(1, 1, 2.0),
        DVector::zeros(1),
        DMatrix::from_column_slice(2, 1, &[1.0, -1.0]),
        DVector::from_row_slice(&[-1.0, -1.0]),
    );
    let s = solve(&p).unwrap();
    assert_eq!(s.status, QpStatus::Infeasible);
    let y = s.certificate.clone().unwrap();
    assert!(y.iter().all(|&v| v >= 0.0));
    assert!((p.g.transpose() * &y).amax() < 1e-12);
    assert!(p.w.dot(&y) < 0.0);
    assert!(s.blocking_row().is_some());
}

#[test]
fn rejects_indefinite_and_misshaped_problems() {
    let bad = QpProblem::unconstrained(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]), DVector::zeros(2));
    assert_eq!(solve(&bad), Err(QpError::NotPositiveDefinite));
    let asym = QpProblem::unconstrained(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]), DVector::zeros(2));
    assert_eq!(solve(&asym), Err(QpError::NotPositiveDefinite));
    let shape = QpProblem::new(DMatrix::identity(2, 2), DVector::zeros(2), DMatrix::zeros(1, 3), DVector::zeros(1));
    assert!(matches!(solve(&shape), Err(QpError::Shape(_))));
    let nan = QpProblem::unconstrained(DMatrix::identity(1, 1), DVector::from_element(1, f64::NAN));
    assert_eq!(solve(&nan), Err(QpError::NonFinite));
}

#[test]
fn matches_exhaustive_active_set_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for case in 0..60 {
        let m = rng.gen_range(1..=8);
        let r = rng.gen_range(0..=12);
        let p = random_problem(&mut rng, m, r);
        let s = solve(&p).unwrap();
        assert!(s.is_solved(), "case {case}");
        assert!(s.kkt_residual < 1e-8, "case {case}: kkt {}", s.kkt_residual);
        let oracle = brute_force(&p);
        assert!((&s.lambda - &oracle).amax() < 1e-8, "case {case}");
    }
}

#[test]
fn degenerate_duplicate_constraints_terminate() {
    // The same half-space three times plus a redundant scaled copy.
    let p = QpProblem::new(
        DMatrix::identity(2, 2) * 2.0,
        DVector::from_row_slice(&[-4.0, -4.0]),
        DMatrix::from_row_slice(4, 2, &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 1.0, 1.0]),
        DVector::from_row_slice(&[1.0, 1.0, 2.0, 1.0]),
    );
    let s = solve(&p).unwrap();
    assert!(s.is_solved());
    assert!((s.lambda[0] - 0.5).abs() < 1e-12 && (s.lambda[1] - 0.5).abs() < 1e-12);
    assert!(s.kkt_residual < 1e-10);
}

#[test]
fn warm_start_reuses_active_set() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = random_problem(&mut rng, 4, 10);
    let mut solver = QpSolver::new();
    let first = solver.solve(&p).unwrap();
    let mut nudged = p.clone();
    nudged.q[0] += 1e-6;
    let second = solver.solve(&nudged).unwrap();
    let cold = solve(&nudged).unwrap();
    assert_eq!(second.iterations, 0);
    assert_eq!(second.active, first.active);
    assert!((&second.lambda - &cold.lambda).amax() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scaling_objective_leaves_solution_unchanged(seed in 0u64..1000, scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_problem(&mut rng, 3, 6);
        let mut scaled = p.clone();
        scaled.h *= scale;
        scaled.q *= scale;
        let a = solve(&p).unwrap();
        let b = solve(&scaled).unwrap();
        prop_assert!((&a.lambda - &b.lambda).amax() < 1e-10);
    }

    #[test]
    fn solutions_satisfy_kkt(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.gen_range(1..=6);
        let r = rng.gen_range(0..=10);
        let p = random_problem(&mut rng, m, r);
        let s = solve(&p).unwrap();
        prop_assert!(s.is_solved());
        prop_assert!((&p.g * &s.lambda - &p.w).iter().all(|&v| v <= 1e-9));
        prop_assert!((&p.h * &s.lambda + &p.q + p.g.transpose() * &s.mu).amax() < 1e-8);
        prop_assert!(s.mu.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn warm_and_cold_starts_agree(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p1 = random_problem(&mut rng, 4, 8);
        let p2 = random_problem(&mut rng, 4, 8);
        let mut solver = QpSolver::new();
        solver.solve(&p1).unwrap();
        let warm = solver.solve(&p2).unwrap();
        let cold = solve(&p2).unwrap();
        prop_assert!((&warm.lambda - &cold.lambda).amax() < 1e-9);
    }
}
