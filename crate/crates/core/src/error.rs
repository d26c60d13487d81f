use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("vocabulary error: token id {id} outside vocabulary of size {vocab_size}")]
    Vocabulary { id: usize, vocab_size: usize },

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("integrity error at {}: {reason}", path.display())]
    Integrity { path: PathBuf, reason: String },

    #[error("compatibility error: {0}")]
    Compatibility(String),

    #[error("training error at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    /// Short machine-parsable category, used as the CLI error prefix.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::NumericDomain(_) => "numeric-domain",
            Error::Contract(_) => "contract",
            Error::Vocabulary { .. } => "vocabulary",
            Error::Configuration(_) => "configuration",
            Error::Integrity { .. } => "integrity",
            Error::Compatibility(_) => "compatibility",
            Error::Training { .. } => "training",
            Error::InvariantViolation(_) => "invariant",
            Error::MissingPrerequisite(_) => "missing-prerequisite",
            Error::Io { .. } => "io",
            Error::Format(_) => "format",
        }
    }

    /// Process exit status: 2 for problems with the invocation or its inputs
    /// (bad configuration, missing prerequisite), 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Configuration(_) | Error::MissingPrerequisite(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn integrity(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Integrity {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(format!($($arg)*))
    };
}
pub(crate) use dim_err;
