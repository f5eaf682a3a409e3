use nalgebra::DVector;

use super::lqr::LqrDesign;
use super::ControlError;
use crate::model::ELModel;

/// `V(y) = x̃ᵀ P x̃` with `x̃ = Φ(y, d̄) − x_d` (equal to `Φ(y)ᵀPΦ(y)` when
/// the target is the origin).
pub fn clf_value(model: &ELModel, design: &LqrDesign, y: &[f64]) -> Result<f64, ControlError> {
    let x = DVector::from_vec(model.x_from_y(y, &design.d_bar)?);
    let e = x - &design.x_d;
    Ok(e.dot(&(&design.p * &e)))
}

/// Sontag's universal formula
/// `u = −(L_fV + √(L_fV² + |L_gV|⁴)) / |L_gV|² · L_gVᵀ`, and `u = 0`
/// when `L_gV = 0`.
pub fn sontag_control(lfv: f64, lgv: &DVector<f64>) -> DVector<f64> {
    let b2 = lgv.norm_squared();
    if b2 == 0.0 {
        return DVector::zeros(lgv.len());
    }
    let r_d = b2 / (lfv + (lfv * lfv + b2 * b2).sqrt());
    -lgv / r_d
}

/// Lie derivatives of `V = x̃ᵀPx̃` along the shifted linear core
/// `x̃̇ = A x̃ + B ũ`: `(L_fV, L_gV)`.
pub fn clf_lie_derivatives(design: &LqrDesign, x: &DVector<f64>) -> (f64, DVector<f64>) {
    let e = x - &design.x_d;
    let pe = &design.p * &e;
    let lfv = 2.0 * pe.dot(&(&design.a * &e));
    let lgv = (design.b.transpose() * &pe) * 2.0;
    (lfv, lgv)
}

/// Sontag feedback on the linear core around the design target.
pub fn sontag_feedback(design: &LqrDesign, x: &DVector<f64>) -> DVector<f64> {
    let (lfv, lgv) = clf_lie_derivatives(design, x);
    &design.u_d + sontag_control(lfv, &lgv)
}
