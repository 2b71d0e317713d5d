use std::path::PathBuf;

/// Crate-wide error type. CLI exit codes are derived from the variant class:
/// configuration and usage problems map to 2, data and I/O problems to 3,
/// numeric divergence during training to 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("{context}: {reason}")]
    InvalidInput {
        context: &'static str,
        reason: String,
    },

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path:?}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite value in loss term `{term}` at iteration {iteration}")]
    NonFinite { term: &'static str, iteration: u64 },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(context: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidInput {
            context,
            reason: reason.into(),
        }
    }

    /// Process exit code the CLI reports for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::NonFinite { .. } => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
