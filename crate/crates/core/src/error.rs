use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, indices or settings that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("training failed at step {step}: {reason}")]
    Training { step: u64, reason: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("ingestion error in {}: field `{field}`: {reason}", file.display())]
    Ingest {
        file: PathBuf,
        field: String,
        reason: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error at {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn ingest(
        file: impl Into<PathBuf>,
        field: impl Into<String>,
        reason: impl Into<String>,
    ) -> Self {
        Error::Ingest {
            file: file.into(),
            field: field.into(),
            reason: reason.into(),
        }
    }
}
