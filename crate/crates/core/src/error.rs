use std::path::PathBuf;

use thiserror::Error;

/// Errors reported by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied data that violates an operation's precondition.
    #[error("input error: {0}")]
    Input(String),

    /// Inconsistent configuration or mismatched dimensions.
    #[error("configuration error: {0}")]
    Config(String),

    /// A non-finite value or failed gradient check.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("conflict: {0}")]
    Conflict(String),

    /// Operation invoked in a state that cannot serve it (empty registry, missing checkpoint).
    #[error("state error: {0}")]
    State(String),

    /// Schema violations collected while reading a line-oriented file.
    #[error("parse error in {}: {}", path.display(), format_lines(lines))]
    Parse {
        path: PathBuf,
        lines: Vec<(usize, String)>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn format_lines(lines: &[(usize, String)]) -> String {
    lines
        .iter()
        .map(|(n, msg)| format!("line {n}: {msg}"))
        .collect::<Vec<_>>()
        .join("; ")
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::input(format!("csv: {e}"))
}
