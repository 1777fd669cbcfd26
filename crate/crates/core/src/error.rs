use std::path::PathBuf;

use thiserror::Error;

use crate::model::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration:\n{}", format_violations(.0))]
    Validation(Vec<Violation>),

    #[error("{0}")]
    InvalidInput(String),

    #[error(
        "memory estimate {required} bytes exceeds the limit of {limit} bytes \
         (D = {dim}; dense Hamiltonian alone needs {hamiltonian} bytes)"
    )]
    Memory {
        dim: usize,
        required: u64,
        hamiltonian: u64,
        limit: u64,
    },

    #[error("eigensolver failed for a {dim}x{dim} matrix: {reason}")]
    Eigensolver { dim: usize, reason: String },

    #[error("cache error at {path}: {reason}")]
    Cache { path: PathBuf, reason: String },

    #[error("failed to parse {path}: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::InvalidInput(_) | Error::Parse { .. } => 2,
            Error::Memory { .. } => 3,
            Error::Eigensolver { .. } => 4,
            Error::Cache { .. } => 5,
            Error::Io { .. } => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn cache(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Cache {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|v| format!("  {}: {}", v.field, v.message))
        .collect::<Vec<_>>()
        .join("\n")
}
