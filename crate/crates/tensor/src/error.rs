use thiserror::Error;

/// Errors raised by tensor construction, graph recording, and backward passes.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },

    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    LossNotScalar(Vec<usize>),

    #[error("node {0} is not part of this record")]
    UnknownNode(usize),

    #[error("parameter {0:?} not found")]
    UnknownParam(String),

    #[error("parameter {0:?} registered twice")]
    DuplicateParam(String),

    #[error("batch norm {0:?} has no running statistics")]
    MissingRunningStats(String),

    #[error("gradient check: two evaluations of the loss disagree ({0} vs {1})")]
    NonDeterministicLoss(f64, f64),

    #[error("{op}: empty input list")]
    EmptyInput { op: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;
