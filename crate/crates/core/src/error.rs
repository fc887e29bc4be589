use std::path::PathBuf;

use thiserror::Error;

use crate::molgraph::GraphError;
use crate::smiles::SmilesError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Smiles(#[from] SmilesError),

    #[error(transparent)]
    Graph(#[from] GraphError),

    #[error("invalid schedule range: {0}")]
    InvalidRange(String),

    #[error("diffusion step {step} outside 1..={max}")]
    StepOutOfRange { step: usize, max: usize },

    #[error("degenerate schedule: 1 - alpha_bar underflows to zero at step {0}")]
    DegenerateSchedule(usize),

    #[error("non-finite activation in {0}")]
    NonFiniteActivation(&'static str),

    #[error("non-finite gradient at step {step} (loss {loss})")]
    NonFiniteGradient { step: usize, loss: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty evaluation split")]
    EmptySplit,

    #[error("need at least 2 records to split, got {0}")]
    TooFewRecords(usize),

    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: PathBuf, column: String },

    #[error("{0}: empty file")]
    EmptyFile(PathBuf),

    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("incompatible checkpoint: expected config hash {expected}, found {found}")]
    IncompatibleCheckpoint { expected: String, found: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
