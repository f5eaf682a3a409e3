//! Ground-truth plants, excitation signals, open-loop data synthesis and
//! closed-loop simulation with zero-order-hold control.

mod closed_loop;
mod experiment;
mod metrics;
mod open_loop;
mod plants;
mod signal;
mod summary;

pub use closed_loop::{
    simulate_closed_loop, ClosedLoopConfig, ControllerKind, Scenario, SimulationTrace, TraceMeta, TraceRow, Waypoint,
    STANDARD_SCENARIO_TOML,
};
pub use experiment::ExperimentConfig;
pub use metrics::{r2, r2_columns, rmse};
pub use open_loop::{free_run, simulate_open_loop, OpenLoopOptions};
pub use plants::{FnPlant, ModelPlant, NonlinearPlant, PlantSpec, TeacherConfig};
pub use signal::{gen_excitation, Excitation, Interpolation, Signal, SineTerm};
pub use summary::{hold_segments, tracking_segments, SegmentSummary};

use thiserror::Error;

use crate::control::ControlError;
use crate::model::{Dims, ModelError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation request: {0}")]
    Invalid(String),
    #[error("diverged at t = {t}: state {y:?} left the safety box")]
    Diverged { t: f64, y: Vec<f64> },
    #[error("simulation stopped at t = {t}: {source}")]
    Interrupted {
        t: f64,
        source: Box<SimError>,
        /// Rows logged before the failure.
        trace: Box<SimulationTrace>,
    },
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// The true system `ẏ = F(y, v, d, ḋ)`, `z = G(y, v, d)`.
pub trait Plant: Send + Sync {
    fn dims(&self) -> Dims;
    fn derivative(&self, y: &[f64], v: &[f64], d: &[f64], ddot: &[f64]) -> Result<Vec<f64>, SimError>;
    fn outputs(&self, y: &[f64], v: &[f64], d: &[f64]) -> Result<Vec<f64>, SimError>;
    /// Declared state operating box `(lower, upper)`.
    fn operating_box(&self) -> (Vec<f64>, Vec<f64>);
}

#[cfg(test)]
mod tests;
