use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("singular blended transform at point ({x}, {y}, {z}): condition number {condition:.3e}")]
    SingularBlend {
        x: f64,
        y: f64,
        z: f64,
        condition: f64,
    },

    #[error("degenerate normal: pre-normalization length {0:.3e}")]
    DegenerateNormal(f64),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("stale activation cache: {0}")]
    StaleCache(String),

    #[error("empty surface: field has no crossing at level {0}")]
    EmptySurface(f64),

    #[error("mesh is not watertight: {0}")]
    NotWatertight(String),

    #[error("training diverged in stage {stage}, epoch {epoch}: {detail}")]
    Diverged {
        stage: u32,
        epoch: usize,
        detail: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 for bad configuration or input, 3 for a
    /// diverged run, 4 for an empty surface, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Parse { .. } | Error::InvalidInput(_) | Error::DimensionMismatch { .. } => 2,
            Error::Diverged { .. } => 3,
            Error::EmptySurface(_) => 4,
            _ => 1,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
