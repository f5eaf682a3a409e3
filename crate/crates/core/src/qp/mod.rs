//! Dense strictly convex quadratic programs
//!
//! ```text
//! minimize ½ λᵀHλ + qᵀλ   subject to   Gλ ≤ w
//! ```
//!
//! solved by a dual active-set method (Goldfarb–Idnani): start from the
//! unconstrained minimizer and repeatedly add the most violated constraint,
//! dropping active constraints whose multipliers would turn negative. Every
//! iterate is dual feasible, so the first primal feasible iterate is optimal,
//! and a constraint that cannot be satisfied yields a Farkas certificate.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("Hessian is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("non-finite problem data")]
    NonFinite,
    #[error("no convergence after {0} active-set changes")]
    MaxIterations(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem {
    /// `m × m`, symmetric positive definite.
    pub h: DMatrix<f64>,
    pub q: DVector<f64>,
    /// `r × m`; `r` may be zero.
    pub g: DMatrix<f64>,
    pub w: DVector<f64>,
}

impl QpProblem {
    pub fn new(h: DMatrix<f64>, q: DVector<f64>, g: DMatrix<f64>, w: DVector<f64>) -> Self {
        Self { h, q, g, w }
    }

    /// Problem without constraints.
    pub fn unconstrained(h: DMatrix<f64>, q: DVector<f64>) -> Self {
        let m = q.len();
        Self { h, q, g: DMatrix::zeros(0, m), w: DVector::zeros(0) }
    }

    pub fn vars(&self) -> usize {
        self.q.len()
    }

    pub fn rows(&self) -> usize {
        self.w.len()
    }

    fn check(&self) -> Result<(), QpError> {
        let m = self.vars();
        let r = self.rows();
        if self.h.shape() != (m, m) || self.g.shape() != (r, m) {
            return Err(QpError::Shape(format!("H {:?}, q {m}, G {:?}, w {r}", self.h.shape(), self.g.shape())));
        }
        let finite = |s: &[f64]| s.iter().all(|v| v.is_finite());
        if !(finite(self.h.as_slice())
            && finite(self.q.as_slice())
            && finite(self.g.as_slice())
            && finite(self.w.as_slice()))
        {
            return Err(QpError::NonFinite);
        }
        let scale = self.h.amax().max(f64::MIN_POSITIVE);
        if (&self.h - self.h.transpose()).amax() > 1e-12 * scale {
            return Err(QpError::NotPositiveDefinite);
        }
        Ok(())
    }

    /// Objective value at `lambda`.
    pub fn objective(&self, lambda: &DVector<f64>) -> f64 {
        0.5 * lambda.dot(&(&self.h * lambda)) + self.q.dot(lambda)
    }

    /// Largest violation of stationarity, primal feasibility, dual
    /// feasibility and complementarity at `(lambda, mu)`.
    pub fn kkt_residual(&self, lambda: &DVector<f64>, mu: &DVector<f64>) -> f64 {
        let stat = (&self.h * lambda + &self.q + self.g.transpose() * mu).amax();
        let slack = &self.g * lambda - &self.w;
        let primal = slack.iter().fold(0.0f64, |a, &s| a.max(s));
        let dual = mu.iter().fold(0.0f64, |a, &u| a.max(-u));
        let comp = slack.iter().zip(mu.iter()).fold(0.0f64, |a, (s, u)| a.max((s * u).abs()));
        stat.max(primal).max(dual).max(comp)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    Infeasible,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub status: QpStatus,
    pub lambda: DVector<f64>,
    /// Constraint multipliers, zero off the active set.
    pub mu: DVector<f64>,
    /// Active constraint indices, ascending.
    pub active: Vec<usize>,
    /// See [`QpProblem::kkt_residual`]; meaningful when solved.
    pub kkt_residual: f64,
    /// When infeasible: `y ≥ 0` with `Gᵀy = 0` and `wᵀy < 0`.
    pub certificate: Option<DVector<f64>>,
    /// Active-set changes performed.
    pub iterations: usize,
}

impl QpSolution {
    pub fn is_solved(&self) -> bool {
        self.status == QpStatus::Solved
    }

    /// Index of the constraint that could not be added, for infeasible
    /// problems: the largest entry of the certificate.
    pub fn blocking_row(&self) -> Option<usize> {
        let y = self.certificate.as_ref()?;
        (0..y.len()).max_by(|&a, &b| y[a].total_cmp(&y[b]).then(b.cmp(&a)))
    }
}

/// Relative feasibility tolerance on `Gλ − w`.
const FEAS_TOL: f64 = 1e-12;

/// Reusable solver; remembers the last optimal active set and tries it
/// first on the next call.
#[derive(Clone, Debug, Default)]
pub struct QpSolver {
    warm: Option<Vec<usize>>,
    pub warm_start: bool,
}

impl QpSolver {
    pub fn new() -> Self {
        Self { warm: None, warm_start: true }
    }

    pub fn cold() -> Self {
        Self { warm: None, warm_start: false }
    }

    pub fn reset(&mut self) {
        self.warm = None;
    }

    pub fn solve(&mut self, p: &QpProblem) -> Result<QpSolution, QpError> {
        p.check()?;
        let chol = p.h.clone().cholesky().ok_or(QpError::NotPositiveDefinite)?;
        if self.warm_start {
            if let Some(active) = self.warm.as_ref().filter(|a| a.iter().all(|&i| i < p.rows())) {
                if let Some(sol) = try_active_set(p, active) {
                    return Ok(sol);
                }
            }
        }
        let sol = dual_active_set(p, &chol)?;
        if sol.is_solved() {
            self.warm = Some(sol.active.clone());
        }
        Ok(sol)
    }
}

/// Solves `p` from a cold start.
pub fn solve(p: &QpProblem) -> Result<QpSolution, QpError> {
    QpSolver::cold().solve(p)
}

fn feas_scale(p: &QpProblem, i: usize) -> f64 {
    FEAS_TOL * (1.0 + p.w[i].abs() + p.g.row(i).amax())
}

/// Equality-constrained subproblem on `active`:
/// `[H G_Aᵀ; G_A 0] [λ; μ_A] = [−q; w_A]`.
fn solve_eqp(p: &QpProblem, active: &[usize]) -> Option<(DVector<f64>, DVector<f64>)> {
    let m = p.vars();
    let k = active.len();
    let mut kkt = DMatrix::zeros(m + k, m + k);
    kkt.view_mut((0, 0), (m, m)).copy_from(&p.h);
    let mut rhs = DVector::zeros(m + k);
    rhs.rows_mut(0, m).copy_from(&(-&p.q));
    for (a, &i) in active.iter().enumerate() {
        for j in 0..m {
            kkt[(m + a, j)] = p.g[(i, j)];
            kkt[(j, m + a)] = p.g[(i, j)];
        }
        rhs[m + a] = p.w[i];
    }
    let sol = kkt.lu().solve(&rhs)?;
    if sol.iter().all(|v| v.is_finite()) {
        Some((sol.rows(0, m).into_owned(), sol.rows(m, k).into_owned()))
    } else {
        None
    }
}

fn finish(p: &QpProblem, lambda: DVector<f64>, active: &[usize], mu_a: &DVector<f64>, iterations: usize) -> QpSolution {
    let mut mu = DVector::zeros(p.rows());
    for (a, &i) in active.iter().enumerate() {
        mu[i] = mu_a[a].max(0.0);
    }
    let kkt_residual = p.kkt_residual(&lambda, &mu);
    let mut active = active.to_vec();
    active.sort_unstable();
    QpSolution { status: QpStatus::Solved, lambda, mu, active, kkt_residual, certificate: None, iterations }
}

/// Accepts `active` if its equality-constrained solution is primal and dual
/// feasible, which makes it the unique optimum.
fn try_active_set(p: &QpProblem, active: &[usize]) -> Option<QpSolution> {
    let (lambda, mu_a) = solve_eqp(p, active)?;
    if mu_a.iter().any(|&u| u < -1e-12 * (1.0 + mu_a.amax())) {
        return None;
    }
    let slack = &p.g * &lambda - &p.w;
    if (0..p.rows()).any(|i| slack[i] > feas_scale(p, i)) {
        return None;
    }
    Some(finish(p, lambda, active, &mu_a, 0))
}

fn dual_active_set(p: &QpProblem, chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> Result<QpSolution, QpError> {
    let m = p.vars();
    let r = p.rows();
    let mut x = chol.solve(&(-&p.q));
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let max_iter = 20 * (m + r) + 50;
    let mut iterations = 0;
    loop {
        // Most violated constraint; lowest index among ties.
        let slack = &p.g * &x - &p.w;
        let mut pick: Option<(usize, f64)> = None;
        for i in 0..r {
            if active.contains(&i) || slack[i] <= feas_scale(p, i) {
                continue;
            }
            let viol = slack[i] / (1.0 + p.g.row(i).norm());
            if pick.is_none_or(|(_, best)| viol > best) {
                pick = Some((i, viol));
            }
        }
        let Some((np, _)) = pick else {
            // Polish on the final active set; keep the iterate if the
            // re-solve is worse.
            let mu_a = DVector::from_vec(u.clone());
            let cand = finish(p, x.clone(), &active, &mu_a, iterations);
            if let Some((xe, ue)) = solve_eqp(p, &active) {
                let polished = finish(p, xe, &active, &ue, iterations);
                if ue.iter().all(|&v| v >= -1e-10) && polished.kkt_residual <= cand.kkt_residual {
                    return Ok(polished);
                }
            }
            return Ok(cand);
        };
        let gp = p.g.row(np).transpose();
        let mut t_acc = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(QpError::MaxIterations(max_iter));
            }
            // Directions for raising the new multiplier by one unit:
            // H z + G_Aᵀ s = −g_p, G_A z = 0.
            let k = active.len();
            let mut kkt = DMatrix::zeros(m + k, m + k);
            kkt.view_mut((0, 0), (m, m)).copy_from(&p.h);
            for (a, &i) in active.iter().enumerate() {
                for j in 0..m {
                    kkt[(m + a, j)] = p.g[(i, j)];
                    kkt[(j, m + a)] = p.g[(i, j)];
                }
            }
            let mut rhs = DVector::zeros(m + k);
            rhs.rows_mut(0, m).copy_from(&(-&gp));
            let dir = kkt.lu().solve(&rhs).ok_or(QpError::NotPositiveDefinite)?;
            let z = dir.rows(0, m).into_owned();
            let s = dir.rows(m, k).into_owned();
            let gz = gp.dot(&z);
            let primal_step = z.amax() > 1e-14 * (1.0 + gp.amax()) && gz < 0.0;
            // Largest dual step keeping active multipliers nonnegative.
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for a in 0..k {
                if s[a] < 0.0 {
                    let t = u[a] / -s[a];
                    if t < t1 || (t == t1 && drop.is_some_and(|d: usize| active[a] < active[d])) {
                        t1 = t;
                        drop = Some(a);
                    }
                }
            }
            let viol = gp.dot(&x) - p.w[np];
            let t2 = if primal_step { viol / -gz } else { f64::INFINITY };
            if !primal_step && drop.is_none() {
                // g_p = −G_Aᵀ s with s ≥ 0 and g_pᵀx > w_p while G_A x = w_A.
                let mut y = DVector::zeros(r);
                y[np] = 1.0;
                for (a, &i) in active.iter().enumerate() {
                    y[i] = s[a].max(0.0);
                }
                let mut mu = DVector::zeros(r);
                for (a, &i) in active.iter().enumerate() {
                    mu[i] = u[a];
                }
                let mut act = active.clone();
                act.sort_unstable();
                return Ok(QpSolution {
                    status: QpStatus::Infeasible,
                    lambda: x,
                    mu,
                    active: act,
                    kkt_residual: f64::INFINITY,
                    certificate: Some(y),
                    iterations,
                });
            }
            let t = t1.min(t2);
            if primal_step {
                x += &z * t;
            }
            for a in 0..k {
                u[a] += t * s[a];
            }
            t_acc += t;
            if t2 <= t1 {
                active.push(np);
                u.push(t_acc);
                break;
            }
            let d = drop.expect("partial step has a blocking constraint");
            active.remove(d);
            u.remove(d);
        }
    }
}

#[cfg(test)]
mod tests;
