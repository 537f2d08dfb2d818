//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped so a caller (the CLI in particular) can map them onto
/// coarse failure classes: configuration/data problems vs. numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    /// Vector/matrix dimensions inconsistent with the model or each other.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A mathematical precondition was violated (e.g. nonpositive precision).
    #[error("domain error: {0}")]
    Domain(String),

    /// A computation produced a non-finite value.
    #[error("numeric failure in {context}: {detail}")]
    Numeric { context: String, detail: String },

    /// Not enough data to fit or evaluate something.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A trial referenced a vector id that is not present.
    #[error("unknown vector id '{0}'")]
    MissingId(String),

    /// A text file failed to parse.
    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    /// Invalid configuration value.
    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn numeric(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            detail: detail.into(),
        }
    }

    /// True for errors that indicate a numeric breakdown rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Domain(_) | Error::Numeric { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
