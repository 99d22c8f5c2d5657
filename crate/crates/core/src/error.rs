//! Error type shared by every module of the crate.

use thiserror::Error;

use crate::gauge::AdmissibilityReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("harmonic {0} is not part of the grid")]
    GridMismatch(i32),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("ill-conditioned system (condition estimate {cond:.3e})")]
    IllConditioned { cond: f64 },

    #[error("inadmissible gauge: {0}")]
    InadmissibleGauge(AdmissibilityReport),

    #[error("gauge variant mismatch: {0}")]
    VariantMismatch(String),

    #[error("measurement has zero norm (record {0})")]
    ZeroNorm(usize),

    #[error("parse error at '{pointer}': {message}")]
    Parse { pointer: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("optimization diverged: {0}")]
    Diverged(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn parse(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            pointer: pointer.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::IllConditioned { .. } | Error::Diverged(_) | Error::ZeroNorm(_) => 3,
            Error::Io { .. } => 4,
            _ => 2,
        }
    }
}
