use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::lqr::LqrDesign;
use super::ControlError;
use crate::ad::{Graph, NodeId, Tensor};
use crate::model::{ELModel, ModelError};
use crate::nets::Bound;
use crate::qp::{QpProblem, QpSolution, QpSolver};

/// `α(s) = k₁ s + k₂ s|s|`: the quadratic `k₁ s + k₂ s²` on `s ≥ 0`,
/// continued as an odd function so that violated rows (`s < 0`) are pushed
/// back rather than relaxed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Alpha {
    pub k1: f64,
    pub k2: f64,
}

impl Default for Alpha {
    fn default() -> Self {
        Self { k1: 1.0, k2: 1.0 }
    }
}

impl Alpha {
    pub fn eval(&self, s: f64) -> f64 {
        self.k1 * s + self.k2 * s * s.abs()
    }
}

/// Output upper bounds, input box, per-row class-K gains and the λ
/// regularizer `a`. Rows are ordered `[z rows (p), upper v rows (m), lower
/// v rows (m)]`.
///
/// `margin` tightens every row the controller enforces to `h + margin ≤ 0`.
/// The barrier condition only holds between control ticks up to the
/// sampling error, so a small margin keeps the true rows `h ≤ 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierSpec {
    pub z_max: Vec<f64>,
    pub v_min: Vec<f64>,
    pub v_max: Vec<f64>,
    /// One entry per row, or a single entry applied to every row.
    pub alpha: Vec<Alpha>,
    pub a: f64,
    #[serde(default)]
    pub margin: f64,
}

impl BarrierSpec {
    pub fn rows(&self) -> usize {
        self.z_max.len() + 2 * self.v_max.len()
    }

    pub fn alpha(&self, row: usize) -> Alpha {
        if self.alpha.len() == 1 {
            self.alpha[0]
        } else {
            self.alpha[row]
        }
    }

    pub fn validate(&self, p: usize, m: usize) -> Result<(), ControlError> {
        let bad = |s: String| Err(ControlError::InvalidSpec(s));
        if self.z_max.len() != p || self.v_min.len() != m || self.v_max.len() != m {
            return bad(format!("bounds must have lengths z {p}, v {m}"));
        }
        if self.alpha.len() != 1 && self.alpha.len() != self.rows() {
            return bad(format!("alpha needs 1 or {} entries", self.rows()));
        }
        if self.alpha.iter().any(|a| !(a.k1 > 0.0 && a.k2 > 0.0 && a.k1.is_finite() && a.k2.is_finite())) {
            return bad("alpha coefficients must be positive".into());
        }
        if !(self.a > 0.0 && self.a.is_finite()) {
            return bad("regularizer a must be positive".into());
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return bad("margin must be non-negative".into());
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !(finite(&self.z_max) && finite(&self.v_min) && finite(&self.v_max)) {
            return bad("bounds must be finite".into());
        }
        if self.v_min.iter().zip(&self.v_max).any(|(lo, hi)| lo >= hi) {
            return bad("v_min must be below v_max".into());
        }
        Ok(())
    }
}

/// Barrier rows `h(x, u)` and their Jacobians at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct BarrierEval {
    pub h: DVector<f64>,
    /// `rows × n`.
    pub dh_dx: DMatrix<f64>,
    /// `rows × m`.
    pub dh_du: DMatrix<f64>,
}

/// `h = [Ξ(x, u, d̄) − z̄, u − Ψ⁻¹(v̄, Φ⁻¹(x)), Ψ⁻¹(v̲, Φ⁻¹(x)) − u]`.
fn barrier_graph(
    model: &ELModel,
    spec: &BarrierSpec,
    g: &mut Graph,
    p: &Bound,
    x: NodeId,
    u: NodeId,
    d: &[f64],
) -> Result<NodeId, ControlError> {
    let s = &model.scalers;
    let ds = g.constant(Tensor::row(&s.d.scale(d)));
    let ys = model.phi_inv_graph(g, p, x, ds)?;
    let z = model.xi_graph(g, p, x, u, ds).map_err(ModelError::from)?;
    let zmax = g.constant(Tensor::row(&spec.z_max));
    let hz = g.sub(z, zmax)?;
    let vmax = g.constant(Tensor::row(&s.v.scale(&spec.v_max)));
    let vmin = g.constant(Tensor::row(&s.v.scale(&spec.v_min)));
    let umax = model.psi_inv_graph(g, p, vmax, ys, ds)?;
    let umin = model.psi_inv_graph(g, p, vmin, ys, ds)?;
    let hi = g.sub(u, umax)?;
    let lo = g.sub(umin, u)?;
    Ok(g.concat_cols(&[hz, hi, lo])?)
}

/// Barrier rows with Jacobians from reverse-mode passes.
pub fn barrier(
    model: &ELModel,
    spec: &BarrierSpec,
    x: &[f64],
    u: &[f64],
    d: &[f64],
) -> Result<BarrierEval, ControlError> {
    let dims = model.dims;
    spec.validate(dims.p, dims.m)?;
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let xn = g.variable("x", Tensor::row(x));
    let un = g.variable("u", Tensor::row(u));
    let h = barrier_graph(model, spec, &mut g, &p, xn, un, d)?;
    let rows = spec.rows();
    let hv = DVector::from_column_slice(g.value(h).data());
    let mut dh_dx = DMatrix::zeros(rows, dims.n);
    let mut dh_du = DMatrix::zeros(rows, dims.m);
    for i in 0..rows {
        let mut seed = Tensor::zeros(1, rows);
        seed.set(0, i, 1.0);
        let grads = g.backward(h, &seed)?;
        let gx = grads.get_or_zero(&g, xn);
        let gu = grads.get_or_zero(&g, un);
        for j in 0..dims.n {
            dh_dx[(i, j)] = gx.get(0, j);
        }
        for j in 0..dims.m {
            dh_du[(i, j)] = gu.get(0, j);
        }
    }
    Ok(BarrierEval { h: hv, dh_dx, dh_du })
}

/// Barrier rows only, through the numeric model paths.
pub fn barrier_values(
    model: &ELModel,
    spec: &BarrierSpec,
    x: &[f64],
    u: &[f64],
    d: &[f64],
) -> Result<Vec<f64>, ControlError> {
    let y = model.y_from_x(x, d)?;
    barrier_values_at(model, spec, x, &y, u, d)
}

/// As [`barrier_values`] when `y = Φ⁻¹(x)` is already known.
pub fn barrier_values_at(
    model: &ELModel,
    spec: &BarrierSpec,
    x: &[f64],
    y: &[f64],
    u: &[f64],
    d: &[f64],
) -> Result<Vec<f64>, ControlError> {
    let z = model.xi(x, u, d)?;
    let umax = model.u_from_v(&spec.v_max, y, d)?;
    let umin = model.u_from_v(&spec.v_min, y, d)?;
    let mut h: Vec<f64> = z.iter().zip(&spec.z_max).map(|(z, b)| z - b).collect();
    h.extend(u.iter().zip(&umax).map(|(u, b)| u - b));
    h.extend(umin.iter().zip(u).map(|(b, u)| b - u));
    Ok(h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CbfSolution {
    pub u: DVector<f64>,
    pub qp: QpSolution,
}

fn infeasible(sol: &QpSolution, h: &[f64]) -> ControlError {
    ControlError::Infeasible { row: sol.blocking_row().unwrap_or(0), barriers: h.to_vec() }
}

/// `u* = argmin ‖u − k‖²` subject to `∇hᵢ·f + ∇hᵢ·g u ≤ αᵢ(−hᵢ)` for each
/// row and the optional box `lo ≤ u ≤ hi`. Box rows follow the barrier rows
/// in infeasibility reports.
#[allow(clippy::too_many_arguments)]
pub fn cbf_qp(
    f: &DVector<f64>,
    g: &DMatrix<f64>,
    h: &[f64],
    grad_h: &DMatrix<f64>,
    alpha: &[Alpha],
    k: &DVector<f64>,
    u_box: Option<(&DVector<f64>, &DVector<f64>)>,
) -> Result<CbfSolution, ControlError> {
    let m = k.len();
    let rows = h.len();
    if grad_h.shape() != (rows, f.len()) || g.shape() != (f.len(), m) || alpha.len() != rows {
        return Err(ControlError::Shape("cbf_qp dimensions".into()));
    }
    let extra = if u_box.is_some() { 2 * m } else { 0 };
    let mut gm = DMatrix::zeros(rows + extra, m);
    let mut w = DVector::zeros(rows + extra);
    let lf = grad_h * f;
    let lg = grad_h * g;
    for i in 0..rows {
        gm.row_mut(i).copy_from(&lg.row(i));
        w[i] = alpha[i].eval(-h[i]) - lf[i];
    }
    if let Some((lo, hi)) = u_box {
        for j in 0..m {
            gm[(rows + j, j)] = 1.0;
            w[rows + j] = hi[j];
            gm[(rows + m + j, j)] = -1.0;
            w[rows + m + j] = -lo[j];
        }
    }
    let problem = QpProblem::new(DMatrix::identity(m, m) * 2.0, k * -2.0, gm, w);
    let qp = crate::qp::solve(&problem)?;
    if !qp.is_solved() {
        return Err(infeasible(&qp, h));
    }
    Ok(CbfSolution { u: qp.lambda.clone(), qp })
}

/// Integrated internal input of the I-CBF controller.
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerState {
    pub u: DVector<f64>,
    pub t: f64,
}

/// The I-CBF quadratic program at one state, with the constant term that
/// makes `½λᵀHλ + qᵀλ + constant` equal
/// `a‖λ‖² + 2(u − k)ᵀλ − 2(u − k)ᵀ (∂k/∂x)(f + g u)`.
#[derive(Clone, Debug, PartialEq)]
pub struct IcbfProblem {
    pub qp: QpProblem,
    pub constant: f64,
    pub barrier: BarrierEval,
    /// `k(x)`.
    pub k: DVector<f64>,
    /// `f(x) + g(x) u`.
    pub xdot: DVector<f64>,
}

impl IcbfProblem {
    pub fn objective(&self, lambda: &DVector<f64>) -> f64 {
        self.qp.objective(lambda) + self.constant
    }
}

/// Assembles `min a‖λ‖² + 2eᵀλ − 2eᵀ(∂k/∂x) ẋ` subject to
/// `(∂h/∂x) ẋ + (∂h/∂u) λ ≤ α(−h)` from its parts, with `e = u − k(x)`.
/// Returns the QP and the objective's constant term.
pub fn assemble_icbf(
    a: f64,
    e: &DVector<f64>,
    dk_dx: &DMatrix<f64>,
    xdot: &DVector<f64>,
    barrier: &BarrierEval,
    alpha: &[Alpha],
) -> (QpProblem, f64) {
    let m = e.len();
    let constant = -2.0 * e.dot(&(dk_dx * xdot));
    let drift = &barrier.dh_dx * xdot;
    let w = DVector::from_fn(barrier.h.len(), |i, _| alpha[i].eval(-barrier.h[i]) - drift[i]);
    let qp = QpProblem::new(DMatrix::identity(m, m) * (2.0 * a), e * 2.0, barrier.dh_du.clone(), w);
    (qp, constant)
}

pub fn icbf_problem(
    model: &ELModel,
    design: &LqrDesign,
    spec: &BarrierSpec,
    x: &DVector<f64>,
    u: &DVector<f64>,
    d_bar: &[f64],
) -> Result<IcbfProblem, ControlError> {
    let barrier = barrier(model, spec, x.as_slice(), u.as_slice(), d_bar)?;
    let k = design.control(x);
    let xdot = design.xdot(x, u);
    let alphas: Vec<Alpha> = (0..spec.rows()).map(|i| spec.alpha(i)).collect();
    let tightened = BarrierEval { h: barrier.h.add_scalar(spec.margin), ..barrier.clone() };
    // ∂k/∂x = −K for the LQR law.
    let (qp, constant) = assemble_icbf(spec.a, &(u - &k), &(-&design.k), &xdot, &tightened, &alphas);
    Ok(IcbfProblem { qp, constant, barrier, k, xdot })
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcbfStep {
    pub lambda: DVector<f64>,
    pub state: ControllerState,
    /// `Ψ(u_next, y, d̄)` to hold until the next tick.
    pub v: Vec<f64>,
    /// Barrier rows at the pre-step `(x, u)`.
    pub h: Vec<f64>,
    pub qp: QpSolution,
}

/// One controller tick: solve the I-CBF program, integrate `u ← u + Δt λ*`
/// and map the new `u` to `v`.
#[allow(clippy::too_many_arguments)]
pub fn icbf_step(
    model: &ELModel,
    state: &ControllerState,
    y: &[f64],
    d_bar: &[f64],
    design: &LqrDesign,
    spec: &BarrierSpec,
    dt: f64,
    solver: &mut QpSolver,
) -> Result<IcbfStep, ControlError> {
    if !(dt > 0.0) {
        return Err(ControlError::InvalidSpec(format!("control period {dt} must be positive")));
    }
    let x = DVector::from_vec(model.x_from_y(y, d_bar)?);
    let prob = icbf_problem(model, design, spec, &x, &state.u, d_bar)?;
    let qp = solver.solve(&prob.qp)?;
    let h = prob.barrier.h.as_slice().to_vec();
    if !qp.is_solved() {
        return Err(infeasible(&qp, &h));
    }
    let u = &state.u + &qp.lambda * dt;
    if u.iter().any(|v| !v.is_finite()) {
        return Err(ControlError::Model(crate::nets::NetError::NonFinite("integrated input").into()));
    }
    let v = model.v_from_u(u.as_slice(), y, d_bar)?;
    Ok(IcbfStep { lambda: qp.lambda.clone(), state: ControllerState { u, t: state.t + dt }, v, h, qp })
}
