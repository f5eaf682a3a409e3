use nalgebra::{DMatrix, DVector};

use super::ControlError;

/// Largest real part of the eigenvalues of `m`.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
}

pub fn is_hurwitz(m: &DMatrix<f64>) -> bool {
    spectral_abscissa(m) < 0.0
}

/// Frobenius norm of `PA + AᵀP − PBR⁻¹BᵀP + Q`.
pub fn care_residual(p: &DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> f64 {
    let rinv = r.clone().try_inverse().unwrap_or_else(|| DMatrix::from_element(r.nrows(), r.ncols(), f64::NAN));
    (p * a + a.transpose() * p - p * b * rinv * b.transpose() * p + q).norm()
}

/// Solves `Aᵀ X + X A = −M` through the Kronecker form; `A` must have no
/// pair of eigenvalues summing to zero.
pub fn solve_lyapunov(a: &DMatrix<f64>, m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let at = a.transpose();
    let eye = DMatrix::<f64>::identity(n, n);
    let op = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = DVector::from_column_slice((-m).as_slice());
    let x = op.lu().solve(&rhs)?;
    let x = DMatrix::from_column_slice(n, n, x.as_slice());
    Some((&x + x.transpose()) * 0.5)
}

fn check_shapes(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<(), ControlError> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(ControlError::Shape(format!(
            "A {:?}, B {:?}, Q {:?}, R {:?}",
            a.shape(),
            b.shape(),
            q.shape(),
            r.shape()
        )));
    }
    let all = [a, b, q, r];
    if all.iter().any(|x| x.iter().any(|v| !v.is_finite())) {
        return Err(ControlError::Shape("non-finite weights or system matrices".into()));
    }
    Ok(())
}

/// Matrix sign function by scaled Newton iteration.
fn matrix_sign(h: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let dim = h.nrows();
    let mut z = h.clone();
    for _ in 0..100 {
        let lu = z.clone().lu();
        let det = lu.determinant();
        let inv = lu.try_inverse()?;
        let c = if det.is_finite() && det != 0.0 { det.abs().powf(1.0 / dim as f64) } else { 1.0 };
        let next = (&z / c + inv * c) * 0.5;
        let diff = (&next - &z).norm();
        let scale = next.norm();
        z = next;
        if !scale.is_finite() {
            return None;
        }
        if diff <= 1e-13 * scale {
            return Some(z);
        }
    }
    None
}

/// Stabilizing solution of `PA + AᵀP − PBR⁻¹BᵀP + Q = 0`.
///
/// The stable invariant subspace of the Hamiltonian comes from its matrix
/// sign function; Kleinman (Newton) steps then polish the residual.
pub fn solve_care(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>, ControlError> {
    check_shapes(a, b, q, r)?;
    let n = a.nrows();
    let rinv = r.clone().cholesky().ok_or_else(|| ControlError::Shape("R is not positive definite".into()))?.inverse();
    let gmat = b * &rinv * b.transpose();
    let mut ham = DMatrix::zeros(2 * n, 2 * n);
    ham.view_mut((0, 0), (n, n)).copy_from(a);
    ham.view_mut((0, n), (n, n)).copy_from(&(-&gmat));
    ham.view_mut((n, 0), (n, n)).copy_from(&(-q));
    ham.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));
    let hnorm = ham.norm().max(1.0);
    let closest = ham.complex_eigenvalues().iter().map(|z| z.re.abs()).fold(f64::INFINITY, f64::min);
    if closest < 1e-9 * hnorm {
        return Err(ControlError::NoStabilizingSolution(format!(
            "Hamiltonian eigenvalue on the imaginary axis (|Re| = {closest:e})"
        )));
    }
    let w = matrix_sign(&ham).ok_or_else(|| ControlError::NoStabilizingSolution("sign iteration failed".into()))?;
    let eye = DMatrix::<f64>::identity(n, n);
    let mut lhs = DMatrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&w.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n)).copy_from(&(w.view((n, n), (n, n)) + &eye));
    let mut rhs = DMatrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n)).copy_from(&(-(w.view((0, 0), (n, n)) + &eye)));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-w.view((n, 0), (n, n))));
    let mut p =
        lhs.svd(true, true).solve(&rhs, 1e-14).map_err(|e| ControlError::NoStabilizingSolution(e.to_string()))?;
    p = (&p + p.transpose()) * 0.5;
    let mut res = care_residual(&p, a, b, q, r);
    for _ in 0..20 {
        let k = &rinv * b.transpose() * &p;
        let ac = a - b * &k;
        if !is_hurwitz(&ac) {
            break;
        }
        let Some(next) = solve_lyapunov(&ac, &(q + k.transpose() * r * &k)) else {
            break;
        };
        let next_res = care_residual(&next, a, b, q, r);
        if !(next_res < res) {
            break;
        }
        p = next;
        res = next_res;
        if res < 1e-14 * (1.0 + p.norm()) {
            break;
        }
    }
    let k = &rinv * b.transpose() * &p;
    if !is_hurwitz(&(a - b * k)) {
        return Err(ControlError::NoStabilizingSolution("closed loop is not Hurwitz".into()));
    }
    if !res.is_finite() {
        return Err(ControlError::NoStabilizingSolution("non-finite Riccati residual".into()));
    }
    Ok(p)
}
