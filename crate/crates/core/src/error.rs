use std::fmt;
use std::path::PathBuf;

/// Crate-wide error type. The CLI maps variants onto process exit codes,
/// so new variants should pick an existing category where possible.
#[derive(Debug)]
pub enum Error {
    /// Tensor shape or dimension mismatch; message names the offending dims.
    Shape(String),
    /// Numeric failure: non-finite values, symbol overflow, bad hyperparameters.
    Numeric(String),
    /// Filesystem problem, with the path it happened on.
    Io { path: PathBuf, source: std::io::Error },
    /// Malformed or unsupported file content (images, weights, bitstreams, CSV).
    Format(String),
    /// Bitstream was produced by a different weights file.
    DigestMismatch { stream: u64, model: u64 },
    /// Bad configuration value (CLI or key=value config file).
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::DigestMismatch { stream, model } => write!(
                f,
                "weights digest mismatch: bitstream was written with {stream:#018x}, loaded model is {model:#018x}"
            ),
            Error::Config(msg) => write!(f, "config error: {msg}"),
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_names_the_path() {
        let err = Error::io("/tmp/x.ppm", std::io::Error::from(std::io::ErrorKind::NotFound));
        assert!(err.to_string().contains("/tmp/x.ppm"));
    }

    #[test]
    fn digest_mismatch_formats_both_hashes() {
        let err = Error::DigestMismatch { stream: 1, model: 2 };
        let msg = err.to_string();
        assert!(msg.contains("0x0000000000000001") && msg.contains("0x0000000000000002"));
    }
}
