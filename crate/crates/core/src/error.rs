use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library. Each variant belongs to one of three
/// families (configuration, I/O, numerical) which the CLI maps to exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: bad magic")]
    BadMagic { path: PathBuf },

    #[error("{path}: unsupported datatype code {code}")]
    UnsupportedDatatype { path: PathBuf, code: i32 },

    #[error("{path}: truncated file ({detail})")]
    Truncated { path: PathBuf, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("factorization failed for {context}")]
    Factorization { context: String },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed files or filesystem failures.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::BadMagic { .. }
                | Error::UnsupportedDatatype { .. }
                | Error::Truncated { .. }
                | Error::Io { .. }
        )
    }

    /// True for linear-algebra or optimizer failures.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Factorization { .. } | Error::Singular(_) | Error::Numerical(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
