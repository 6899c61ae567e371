use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A hyperparameter or constructor argument is out of range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Data is missing a modality or label that the operation needs.
    #[error("data error: {0}")]
    Data(String),

    #[error("invalid input: {0}")]
    Input(String),

    /// Optimization diverged or produced non-finite values.
    #[error("training error at epoch {epoch}, batch {batch} (lr {lr:e}): {reason}")]
    Training {
        epoch: usize,
        batch: usize,
        lr: f64,
        reason: String,
    },

    /// Binary corpus or checkpoint file is malformed.
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("ingestion error in {file}:{line}: {reason}")]
    Ingest {
        file: PathBuf,
        line: u64,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Fills in the epoch and batch of a training error raised deep in a step.
    pub(crate) fn at(self, epoch: usize, batch: usize) -> Self {
        match self {
            Error::Training { lr, reason, .. } => Error::Training { epoch, batch, lr, reason },
            other => other,
        }
    }
}
