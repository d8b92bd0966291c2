use std::path::PathBuf;

use thiserror::Error;

/// Exit status for malformed invocations (clap uses the same code).
pub const EXIT_USAGE: i32 = 2;
/// Exit status for unreadable, malformed or inadmissible input data.
pub const EXIT_DATA: i32 = 3;
/// Exit status for numerical failures during evaluation or fitting.
pub const EXIT_NUMERIC: i32 = 4;
/// Exit status for file system errors.
pub const EXIT_IO: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("{0}")]
    Model(String),

    #[error("{0}")]
    Numeric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data { .. } | CliError::Model(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Io { .. } => EXIT_IO,
        }
    }

    pub fn data(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        CliError::Data {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Attaches a file name to data-type errors.
    pub fn in_file(self, path: impl Into<PathBuf>) -> Self {
        match self {
            CliError::Model(message) => CliError::data(path, message),
            other => other,
        }
    }
}

impl From<cdph_core::Error> for CliError {
    fn from(e: cdph_core::Error) -> Self {
        use cdph_core::Error as E;
        match e {
            E::OutOfRange(_) => CliError::Usage(e.to_string()),
            E::NonSquare { .. }
            | E::DimensionMismatch(_)
            | E::InvalidParameters(_)
            | E::OffLattice { .. }
            | E::InvalidData(_) => CliError::Model(e.to_string()),
            E::Singular { .. }
            | E::NotTerminating(_)
            | E::ZeroProbability { .. }
            | E::Numeric(_) => CliError::Numeric(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
