use std::path::PathBuf;

use cellcycle::error::{Error as SolverError, ErrorKind};
use thiserror::Error;

/// Exit code of a successful run.
pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_SUBCRITICAL: u8 = 3;
pub const EXIT_RESOLUTION: u8 = 4;
pub const EXIT_NUMERIC: u8 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: missing `{key}`")]
    Missing { key: String },

    #[error("config: `{key}` = `{value}`: {reason}")]
    Invalid {
        key: String,
        value: String,
        reason: String,
    },

    #[error("config: unknown key `{key}`")]
    Unknown { key: String },

    #[error("config: cannot read {path}: {reason}")]
    Read { path: PathBuf, reason: String },

    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Solver(#[from] SolverError),
}

impl CliError {
    pub fn invalid(
        key: impl Into<String>,
        value: impl Into<String>,
        reason: impl Into<String>,
    ) -> Self {
        CliError::Invalid {
            key: key.into(),
            value: value.into(),
            reason: reason.into(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Solver(e) => match e.kind() {
                ErrorKind::Config => EXIT_CONFIG,
                ErrorKind::Subcritical => EXIT_SUBCRITICAL,
                ErrorKind::Resolution => EXIT_RESOLUTION,
                ErrorKind::Numeric => EXIT_NUMERIC,
            },
            _ => EXIT_CONFIG,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
