use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{path}:{line}: {message}")]
    Row {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("config error in section `{section}`, key `{key}`: {message}")]
    Config {
        section: String,
        key: String,
        message: String,
    },

    #[error("degenerate interval: dt must be positive, got {0} h")]
    DegenerateInterval(f64),

    #[error("{0} contains a single class")]
    SingleClass(&'static str),

    #[error("shape mismatch for tensor `{name}`: expected {expected:?}, got {got:?}")]
    Shape {
        name: String,
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("backward called without cached activations")]
    MissingCache,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for input/config problems, 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Diverged { .. } | Error::NonFiniteGradient(_) | Error::MissingCache => 3,
            _ => 2,
        }
    }
}
