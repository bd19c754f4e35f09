//! Error type shared by the whole engine.

use std::fmt;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Dimension or shape contract violation.
    Shape(String),
    /// Bad configuration value or unknown config key.
    Config(String),
    /// Underlying I/O failure, with the path involved.
    Io { path: PathBuf, source: std::io::Error },
    /// Malformed file contents (headers, payload sizes, checksums, versions).
    Format(String),
    /// Numeric failure: NaN/Inf detected, gradient check failed, divergence.
    Numeric(String),
    /// Mask generation could not reach the requested ratio range.
    MaskRatio { requested: (f64, f64), best: f64 },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI: 2 for data/config problems, 3 for
    /// numeric failures. Usage errors (exit 1) are handled by the CLI itself.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::MaskRatio { requested, best } => write!(
                f,
                "mask ratio {:?} unreachable after 100 attempts; best achieved {:.4}",
                requested, best
            ),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
