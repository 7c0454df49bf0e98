use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report.
///
/// Variants are grouped by what the caller can do about them; see
/// [`Error::category`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("structural error: {0}")]
    Shape(String),

    #[error("parse error in column `{column}`: {message}")]
    Parse { column: String, message: String },

    #[error("invalid uncertainty policy: {0}")]
    Policy(String),

    #[error("non-finite gradient at parameter {index}")]
    NonFiniteGradient { index: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: {message}")]
    Training {
        epoch: usize,
        batch: usize,
        message: String,
    },

    #[error("metric undefined: {positives} positive and {negatives} negative labels")]
    UndefinedMetric { positives: usize, negatives: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid file format in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("test split accessed by stage `{stage}`; only evaluation may read it")]
    AccessViolation { stage: String },

    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
}

/// Coarse failure classes, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numerical,
    Other,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::Policy(_) | Error::Locked(_) => ErrorCategory::Config,
            Error::Parse { .. }
            | Error::Data(_)
            | Error::Format { .. }
            | Error::Io { .. }
            | Error::Image { .. }
            | Error::AccessViolation { .. }
            | Error::Shape(_) => ErrorCategory::Data,
            Error::NonFiniteGradient { .. } | Error::Training { .. } => ErrorCategory::Numerical,
            Error::Domain(_) | Error::UndefinedMetric { .. } => ErrorCategory::Other,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
