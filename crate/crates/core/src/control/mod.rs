//! Controller synthesis on the linear core of an EL model: steady targets,
//! LQR, barrier-function safety filters, control Lyapunov functions and the
//! equilibrium optimality check.
//!
//! Barrier convention: the safe set is `{h ≤ 0}` and each row must satisfy
//! `ḣ ≤ α(−h)`.

mod barrier;
mod care;
mod clf;
mod kkt;
mod lqr;

pub use barrier::{
    assemble_icbf, barrier, barrier_values, barrier_values_at, cbf_qp, icbf_problem, icbf_step, Alpha, BarrierEval,
    BarrierSpec, CbfSolution, ControllerState, IcbfProblem, IcbfStep,
};
pub use care::{care_residual, is_hurwitz, solve_care, solve_lyapunov, spectral_abscissa};
pub use clf::{clf_lie_derivatives, clf_value, sontag_control, sontag_feedback};
pub use kkt::{equilibrium_kkt_residual, kkt_from_parts, nnls, KktResidual};
pub use lqr::{core_matrices, lqr_control, steady_input, steady_target, LqrDesign, LqrWeights, SteadyTarget};

use thiserror::Error;

use crate::ad::AdError;
use crate::model::ModelError;
use crate::qp::QpError;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("no stabilizing Riccati solution: {0}")]
    NoStabilizingSolution(String),
    #[error("target not realizable as a steady state (residual {residual:e})")]
    TargetNotRealizable { residual: f64 },
    #[error("barrier program infeasible (blocking row {row}); barrier values {barriers:?}")]
    Infeasible { row: usize, barriers: Vec<f64> },
    #[error("point is not in the feasible set: h[{row}] = {value:e}")]
    NotInFeasibleSet { row: usize, value: f64 },
    #[error("invalid barrier settings: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<AdError> for ControlError {
    fn from(e: AdError) -> Self {
        ControlError::Model(e.into())
    }
}

#[cfg(test)]
mod tests;
