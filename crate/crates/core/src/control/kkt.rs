use nalgebra::{DMatrix, DVector};

use super::barrier::{barrier, BarrierSpec};
use super::lqr::LqrDesign;
use super::ControlError;
use crate::model::ELModel;

/// `argmin ‖A μ − b‖` over `μ ≥ 0` (Lawson–Hanson active set).
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let mut mu = DVector::zeros(n);
    let mut passive = vec![false; n];
    let tol = 1e-12 * (1.0 + a.amax() * b.amax());
    let solve_passive = |passive: &[bool]| -> DVector<f64> {
        let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
        let sub = DMatrix::from_fn(a.nrows(), idx.len(), |i, k| a[(i, idx[k])]);
        let s = sub.svd(true, true).solve(b, 1e-14).unwrap_or_else(|_| DVector::zeros(idx.len()));
        let mut full = DVector::zeros(n);
        for (k, &j) in idx.iter().enumerate() {
            full[j] = s[k];
        }
        full
    };
    for _ in 0..3 * n + 10 {
        let grad = a.transpose() * (b - a * &mu);
        let pick = (0..n).filter(|&j| !passive[j] && grad[j] > tol).max_by(|&i, &j| grad[i].total_cmp(&grad[j]));
        let Some(j) = pick else { break };
        passive[j] = true;
        for _ in 0..3 * n + 10 {
            let s = solve_passive(&passive);
            if (0..n).filter(|&k| passive[k]).all(|k| s[k] > 0.0) {
                mu = s;
                break;
            }
            let mut step = 1.0f64;
            for k in (0..n).filter(|&k| passive[k] && s[k] <= 0.0) {
                step = step.min(mu[k] / (mu[k] - s[k]));
            }
            mu = &mu + (s - &mu) * step;
            for k in 0..n {
                if passive[k] && mu[k] <= tol {
                    passive[k] = false;
                    mu[k] = 0.0;
                }
            }
        }
    }
    mu
}

#[derive(Clone, Debug, PartialEq)]
pub struct KktResidual {
    pub residual: f64,
    pub mu: DVector<f64>,
}

/// Residual of the optimality conditions of
/// `min_u ‖u − k(x)‖² s.t. h(x, u) ≤ 0` at `(x, u)`:
/// `min_{μ ≥ 0} ‖2(u − k) + (∂h/∂u)ᵀμ‖² + ‖μ ∘ h‖²`, square-rooted. The rows
/// are tightened by the barrier margin, as in the controller.
pub fn equilibrium_kkt_residual(
    model: &ELModel,
    design: &LqrDesign,
    spec: &BarrierSpec,
    x: &DVector<f64>,
    u: &DVector<f64>,
    d_bar: &[f64],
    feas_tol: f64,
) -> Result<KktResidual, ControlError> {
    let mut be = barrier(model, spec, x.as_slice(), u.as_slice(), d_bar)?;
    be.h.add_scalar_mut(spec.margin);
    if let Some((row, &value)) = be.h.iter().enumerate().find(|(_, &h)| h > feas_tol) {
        return Err(ControlError::NotInFeasibleSet { row, value });
    }
    let k = design.control(x);
    Ok(kkt_from_parts(&(u - k), &be.h, &be.dh_du))
}

/// Stationarity-plus-complementarity residual given `u − k`, `h` and `∂h/∂u`.
pub fn kkt_from_parts(e: &DVector<f64>, h: &DVector<f64>, dh_du: &DMatrix<f64>) -> KktResidual {
    let m = e.len();
    let r = h.len();
    let mut a = DMatrix::zeros(m + r, r);
    a.view_mut((0, 0), (m, r)).copy_from(&dh_du.transpose());
    for i in 0..r {
        a[(m + i, i)] = h[i];
    }
    let mut b = DVector::zeros(m + r);
    b.rows_mut(0, m).copy_from(&(e * -2.0));
    let mu = nnls(&a, &b);
    let residual = (&a * &mu - &b).norm();
    KktResidual { residual, mu }
}
