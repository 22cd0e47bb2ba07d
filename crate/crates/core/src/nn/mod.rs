//! Minimal differentiable-tensor core: exactly the layer set the liveness
//! model needs, with reverse-mode gradients verified against finite
//! differences.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Parameter};
pub use gradcheck::{finite_difference, grad_check, GradCheckReport, GRAD_CHECK_FLOOR, GRAD_CHECK_STEP};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("non-finite values: {0}")]
    NonFinite(String),
    #[error("batch composition: {0}")]
    BatchComposition(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("io error on {0}: {1}")]
    Io(String, #[source] std::io::Error),
}
