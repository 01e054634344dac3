use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),

    #[error("backward called without a recorded forward pass")]
    NoGraph,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("model is not calibrated (negative reconstruction median must be > 0, got {0})")]
    Uncalibrated(f64),

    #[error("cannot build training pairs: {0}")]
    UnsatisfiablePairing(String),

    #[error("training diverged in epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("bag has no instances")]
    EmptyBag,

    #[error("degenerate training set: {0}")]
    DegenerateTraining(String),

    #[error("invalid fold plan: {0}")]
    InvalidFold(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("bad model file: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_fold(self, fold: usize) -> Self {
        Error::Fold {
            fold,
            source: Box::new(self),
        }
    }

    /// Process exit code: 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidHyperparameter(_) | Error::InvalidFold(_) => 1,
            Error::Divergence { .. } | Error::NoGraph => 3,
            Error::Fold { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}
