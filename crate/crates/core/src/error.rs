use std::path::PathBuf;

use cresnet_tensor::TensorError;
use thiserror::Error;

use crate::arch::Violation;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("unknown architecture `{name}`; available: {}", available.join(", "))]
    UnknownArch { name: String, available: Vec<String> },

    #[error("invalid architecture: {}", first_violation(.0))]
    InvalidSpec(Vec<Violation>),

    #[error("{block} jumper {index}: {reason}")]
    JumperShape { block: String, index: usize, reason: String },

    #[error("{path}: {message}")]
    SpecParse { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: byte {offset}: {reason}")]
    Format { path: PathBuf, offset: u64, reason: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint checksum mismatch; the file is corrupted or truncated")]
    CheckpointChecksum,

    #[error("checkpoint is inconsistent with the model: {0}")]
    CheckpointMismatch(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}; first non-finite value produced by {layer}")]
    NonFiniteLoss { epoch: usize, batch: usize, layer: String },

    #[error("summary needs {required} epochs per run but run {run} has {available}")]
    InsufficientEpochs { run: usize, required: usize, available: usize },

    #[error("invalid configuration: {0}")]
    Config(String),
}

fn first_violation(v: &[Violation]) -> String {
    match v.first() {
        Some(first) if v.len() > 1 => format!("{first} (and {} more)", v.len() - 1),
        Some(first) => first.to_string(),
        None => "no violations recorded".into(),
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
