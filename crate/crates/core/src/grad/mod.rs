//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records primitives as they execute; [`Graph::backward`] sweeps
//! the tape in reverse. Named parameters live in a [`ParamStore`] and are bound
//! into a graph through a [`Scope`].

mod attention;
mod check;
mod checkpoint;
mod graph;
mod optim;
mod params;
mod tensor;

pub use attention::{attention, multi_head_attention, Mask};
pub use check::{grad_check, grad_check_params};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use graph::{primitive_set, Gradients, Graph, NodeId, Primitive};
pub use optim::{LrSchedule, Optimizer, OptimizerKind};
pub use params::{ParamGrads, ParamStore, Scope};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("shape contract violated in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite value at node {node} ({op})")]
    NonFinite { node: usize, op: String },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GradError {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        GradError::Shape { op, detail }
    }
}
