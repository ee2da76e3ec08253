use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An operation was called out of order or with an unsupported argument.
    #[error("usage error: {0}")]
    Usage(String),

    /// Input file does not match the expected column layout.
    #[error("schema error: {0}")]
    Schema(String),

    /// A cell could not be parsed. `line` is 1-based and counts the header.
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("data error: {0}")]
    Data(String),

    /// A column has zero inter-quartile range and cannot be robust-scaled.
    #[error("degenerate column `{0}`: inter-quartile range is zero")]
    DegenerateColumn(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("training error: {0}")]
    Training(String),

    /// Internal wiring of the layer graph violated its own invariants.
    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
