use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch on {axis}: expected {expected}, got {actual}")]
    Dimension {
        op: &'static str,
        axis: String,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: expected rank {expected} tensor, got shape {actual:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        actual: Vec<usize>,
    },

    #[error("{op}: shapes {lhs:?} and {rhs:?} do not match")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape {shape:?} holds {expected} elements but {actual} values were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: invalid argument: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("label {label} at row {row} is out of range for {classes} classes")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },

    #[error("batch norm running statistics are not initialized; run a training step first")]
    StatsNotInitialized,

    #[error("backward called on a tensor that is detached from every trainable leaf")]
    Detached,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
