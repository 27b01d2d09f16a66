//! Small reverse-mode autodiff engine used by the HOI detector.
//!
//! Everything is a dense `f64` matrix; the engine trades generality for a
//! compact set of fused ops (attention, layer norm, im2col) whose backward
//! passes are written by hand and checked against finite differences.

pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;

pub use graph::{FocalParams, Gradients, Graph, Var, Window};
pub use params::{Param, ParamGroup, ParamId, ParamStore};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}
