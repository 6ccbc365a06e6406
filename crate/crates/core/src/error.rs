use std::path::PathBuf;

/// Errors produced by the quality-control engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid parameters or missing required inputs.
    #[error("configuration error: {0}")]
    Config(String),

    /// On-disk data that does not match its declared layout.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("index out of bounds: {0}")]
    Bounds(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A cell was never covered by any patch.
    #[error("coverage error: {0}")]
    Coverage(String),

    #[error("empty segmentation: {0}")]
    EmptySegmentation(String),

    #[error("conflicting records: {0}")]
    Conflict(String),

    /// A statistic is undefined for the given input (e.g. a single class).
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
