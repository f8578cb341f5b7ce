use std::path::PathBuf;

/// Errors shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor or filter axis does not match what an operation requires.
    #[error("dimension mismatch on {axis}: expected {expected}, got {got}")]
    Dimension {
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    /// Convolution / pooling geometry that cannot produce a valid output.
    #[error("invalid geometry: {0}")]
    Geometry(String),

    /// Bad value passed to an operation (non-finite weight, label out of range, ...).
    #[error("validation failed: {0}")]
    Validation(String),

    /// Network or training configuration that fails semantic checks.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Text-format parse failure with a 1-based line number.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Underlying filesystem failure, tagged with the offending path.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed dataset or checkpoint bytes, with the offset that failed.
    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    /// Benchmark harness failure (insufficient timer resolution, bad suite config).
    #[error("benchmark error: {0}")]
    Bench(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
