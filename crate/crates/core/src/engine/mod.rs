//! Dense f64 tensors, a gradient tape, batch norm, finite-difference checks
//! and the checkpoint file format.

mod batchnorm;
mod checkpoint;
mod gradcheck;
mod graph;
mod param;
mod tensor;

pub use batchnorm::BatchNormState;
pub use checkpoint::{config_hash, load_checkpoint, save_checkpoint, ArraySpec, CheckpointHeader, CHECKPOINT_FORMAT};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{BatchStats, Gradients, Graph, NodeId};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("tensor of shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    BadData { shape: Vec<usize>, len: usize },
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EngineError>;
