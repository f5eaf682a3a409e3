use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::care::{care_residual, solve_care, spectral_abscissa};
use super::ControlError;
use crate::model::{ELModel, LinearCore};

/// Linear core `(A, B, c)` as nalgebra values.
pub fn core_matrices(core: &LinearCore) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let [n, m] = [core.b.rows(), core.b.cols()];
    (
        DMatrix::from_row_slice(n, n, core.a.data()),
        DMatrix::from_row_slice(n, m, core.b.data()),
        DVector::from_column_slice(&core.c),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct SteadyTarget {
    pub x_d: DVector<f64>,
    pub u_d: DVector<f64>,
    /// `‖A x_d + B u_d + c‖`.
    pub residual: f64,
}

/// Minimum-norm least-squares `u_d` with `A x_d + B u_d + c ≈ 0`.
pub fn steady_input(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DVector<f64>, x_d: &DVector<f64>) -> (DVector<f64>, f64) {
    let target = -(a * x_d + c);
    let u_d = b
        .clone()
        .svd(true, true)
        .solve(&target, 1e-12 * b.amax().max(f64::MIN_POSITIVE))
        .unwrap_or_else(|_| DVector::zeros(b.ncols()));
    let residual = (a * x_d + b * &u_d + c).norm();
    (u_d, residual)
}

/// `x_d = Φ(y_d, d̄)` and the input holding it at rest. Fails when the
/// residual exceeds `tol` (coordinates are standardized, so the tolerance is
/// scale free).
pub fn steady_target(model: &ELModel, y_d: &[f64], d_bar: &[f64], tol: f64) -> Result<SteadyTarget, ControlError> {
    let x_d = DVector::from_vec(model.x_from_y(y_d, d_bar)?);
    let (a, b, c) = core_matrices(&model.linear_at(d_bar)?);
    let (u_d, residual) = steady_input(&a, &b, &c, &x_d);
    if !(residual <= tol) {
        return Err(ControlError::TargetNotRealizable { residual });
    }
    Ok(SteadyTarget { x_d, u_d, residual })
}

/// LQR weights; `None` means identity.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LqrWeights {
    pub q: Option<Vec<Vec<f64>>>,
    pub r: Option<Vec<Vec<f64>>>,
}

fn dense(rows: &Option<Vec<Vec<f64>>>, dim: usize, what: &str) -> Result<DMatrix<f64>, ControlError> {
    match rows {
        None => Ok(DMatrix::identity(dim, dim)),
        Some(v) => {
            if v.len() != dim || v.iter().any(|r| r.len() != dim) {
                return Err(ControlError::Shape(format!("{what} must be {dim}x{dim}")));
            }
            Ok(DMatrix::from_fn(dim, dim, |i, j| v[i][j]))
        }
    }
}

impl LqrWeights {
    pub fn matrices(&self, n: usize, m: usize) -> Result<(DMatrix<f64>, DMatrix<f64>), ControlError> {
        Ok((dense(&self.q, n, "Q")?, dense(&self.r, m, "R")?))
    }
}

/// Tracking LQR on the linear core at a frozen disturbance.
#[derive(Clone, Debug, PartialEq)]
pub struct LqrDesign {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: DMatrix<f64>,
    /// `R⁻¹BᵀP`.
    pub k: DMatrix<f64>,
    pub x_d: DVector<f64>,
    pub u_d: DVector<f64>,
    /// Disturbance the design was made for (empty for raw matrices).
    pub d_bar: Vec<f64>,
    pub riccati_residual: f64,
    pub target_residual: f64,
    /// Largest real part of the closed-loop eigenvalues.
    pub abscissa: f64,
}

impl LqrDesign {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DVector<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        x_d: DVector<f64>,
        u_d: DVector<f64>,
    ) -> Result<Self, ControlError> {
        let p = solve_care(&a, &b, &q, &r)?;
        let rinv = r.clone().try_inverse().ok_or_else(|| ControlError::Shape("R is singular".into()))?;
        let k = &rinv * b.transpose() * &p;
        let riccati_residual = care_residual(&p, &a, &b, &q, &r);
        let abscissa = spectral_abscissa(&(&a - &b * &k));
        let target_residual = (&a * &x_d + &b * &u_d + &c).norm();
        Ok(Self { a, b, c, q, r, p, k, x_d, u_d, d_bar: Vec::new(), riccati_residual, target_residual, abscissa })
    }

    /// Steady target for `y_d` plus the LQR gain at `d̄`.
    pub fn for_model(
        model: &ELModel,
        y_d: &[f64],
        d_bar: &[f64],
        weights: &LqrWeights,
        target_tol: f64,
    ) -> Result<Self, ControlError> {
        let target = steady_target(model, y_d, d_bar, target_tol)?;
        let (a, b, c) = core_matrices(&model.linear_at(d_bar)?);
        let (q, r) = weights.matrices(model.dims.n, model.dims.m)?;
        let mut design = Self::new(a, b, c, q, r, target.x_d, target.u_d)?;
        design.d_bar = d_bar.to_vec();
        Ok(design)
    }

    /// `u = u_d − K (x − x_d)`.
    pub fn control(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.u_d - &self.k * (x - &self.x_d)
    }

    /// `A x + B u + c`.
    pub fn xdot(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + &self.c
    }
}

pub fn lqr_control(design: &LqrDesign, x: &DVector<f64>) -> DVector<f64> {
    design.control(x)
}
