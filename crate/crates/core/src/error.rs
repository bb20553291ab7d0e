use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{op}: incompatible shapes {shapes}")]
    Shape { op: &'static str, shapes: String },

    #[error("molecule has no atoms")]
    EmptyMolecule,

    #[error("item {index} has length {length} which exceeds pack capacity {capacity}")]
    CapacityExceeded {
        index: usize,
        length: usize,
        capacity: usize,
    },

    #[error("position {position} exceeds the model's maximum of {max}")]
    PositionOverflow { position: usize, max: usize },

    #[error("atom type {0} is not in the vocabulary")]
    UnknownType(String),

    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, shapes: impl Into<String>) -> Self {
        Error::Shape {
            op,
            shapes: shapes.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure came from the data rather than from how the
    /// program was invoked or from numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::EmptyMolecule
                | Error::CapacityExceeded { .. }
                | Error::UnknownType(_)
                | Error::VocabularyMismatch(_)
                | Error::Checkpoint(_)
                | Error::Io { .. }
                | Error::PositionOverflow { .. }
        )
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}
