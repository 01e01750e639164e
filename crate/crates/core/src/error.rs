use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    /// The exact oracle refuses to enumerate more arrangements than its budget allows.
    #[error("enumeration budget exceeded: {needed} ordered arrangements > budget {budget}")]
    BudgetExceeded { needed: u128, budget: u128 },

    #[error("merge error: {0}")]
    Merge(String),

    /// A metric or score is not defined for the given input (empty group, demo never sampled, ...).
    #[error("undefined: {0}")]
    Undefined(String),

    #[error("shortage: {0}")]
    Shortage(String),

    #[error("unknown demonstration id `{0}`")]
    UnknownId(String),

    /// A run stopped early; everything up to the failure point was kept.
    #[error("partial result after {completed} of {requested} units: {cause}")]
    Partial {
        completed: usize,
        requested: usize,
        cause: Box<Error>,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

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
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps a backend failure with a short description of what was being evaluated.
    pub fn context(self, what: impl std::fmt::Display) -> Self {
        match self {
            Error::Backend(msg) => Error::Backend(format!("{what}: {msg}")),
            Error::Protocol(msg) => Error::Protocol(format!("{what}: {msg}")),
            other => other,
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Backend(_) | Error::Protocol(_) => 3,
            Error::Partial { .. } => 4,
            _ => 2,
        }
    }
}
