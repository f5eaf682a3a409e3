//! Parametrized map families: disturbance-conditioned MLPs, bijective
//! sinh/asinh networks (full and diagonal) and partially input-convex
//! networks.

mod bnn;
mod dbnn;
mod mlp;
mod params;
mod picnn;

pub use bnn::{Bnn, BnnEval, BnnInit, BnnLayer, FrozenBnn, FrozenEval};
pub use dbnn::{DiagonalBnn, DiagonalLayer};
pub use mlp::{MlpInit, ParamMlp};
pub use params::{Bound, ParamRef, ParamStore};
pub use picnn::Picnn;

use thiserror::Error;

use crate::ad::AdError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("bijective layer {layer} weight is ill-conditioned (condition {condition:e})")]
    IllConditioned { layer: usize, condition: f64 },
    #[error("negative entry in a nonnegativity-constrained weight ({0})")]
    NegativeWeight(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}
