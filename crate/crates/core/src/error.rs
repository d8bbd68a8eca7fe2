use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}: {loss}\n--- config ---\n{config}")]
    NonFinite { step: usize, loss: f64, config: String },

    #[error("parameter-count parity violated: {0}")]
    Parity(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("no experts: {0}")]
    NoExperts(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } => 3,
            Error::Parity(_) => 4,
            _ => 2,
        }
    }
}
