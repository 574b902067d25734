use thiserror::Error;

pub type Shape = (usize, usize);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("{op}: incompatible input shapes {shapes:?}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Shape> },

    #[error("{op}: expected {expected} input(s), got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: {reason}")]
    InvalidOp { op: &'static str, reason: String },

    #[error("loss must be a 1x1 scalar, got shape {0:?}")]
    NonScalarLoss(Shape),

    #[error("graph is not acyclic: node {node} has parent {parent}")]
    Cycle { node: usize, parent: usize },

    #[error("node {0} does not belong to this tape")]
    UnknownNode(usize),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, DiffError>;
