use thiserror::Error;

use crate::tensor::Shape;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch { op: &'static str, left: Shape, right: Shape },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("differentiation needs a scalar output, got shape {0}")]
    NonScalarOutput(Shape),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("data of length {len} does not fit shape {shape}")]
    BadData { len: usize, shape: Shape },

    #[error("node {0} does not exist on this tape")]
    UnknownNode(usize),

    #[error("node {0} is not a leaf")]
    NotALeaf(usize),

    #[error("leaf {0} cannot be reassigned while derived nodes exist")]
    LeafInUse(usize),

    #[error("invalid argument to {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
