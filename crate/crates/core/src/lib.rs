//! Learning exactly-linearizable models from trajectory data and designing
//! constraint-aware controllers on them.

// `!(a <= b)` rejects NaN on purpose; index loops mirror the matrix algebra.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod ad;
pub mod control;
pub mod lie;
pub mod model;
pub mod nets;
pub mod qp;
pub mod sim;

pub use ad::{AdError, Graph, NodeId, Tensor};
pub use control::{BarrierSpec, ControlError, LqrDesign, LqrWeights};
pub use lie::{check_linearizable, CheckOptions, CheckReport, InputAffineSystem, LieError, SampleBox, Verdict};
pub use model::{
    Architecture, DatasetMeta, Dims, ELModel, ModelError, Scalers, TrainConfig, TrainError, TrajectoryDataset,
};
pub use qp::{QpError, QpProblem, QpSolution, QpSolver};
pub use sim::{
    ClosedLoopConfig, ControllerKind, ExperimentConfig, Plant, PlantSpec, Scenario, SimError, SimulationTrace,
    TeacherConfig,
};
