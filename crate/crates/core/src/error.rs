use std::path::PathBuf;

/// Errors raised across the extraction, training and evaluation pipeline.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("unsupported pixel format in {path}: {format}")]
    UnsupportedFormat { path: PathBuf, format: String },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    Version(u32),

    #[error("length mismatch: expected {expected} samples, found {found}")]
    Length { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("expected {expected} channel(s), found {found}")]
    Channels { expected: usize, found: usize },

    #[error("patch at ({top}, {left}) of size {size} exceeds {height}x{width} image")]
    OutOfBounds {
        top: usize,
        left: usize,
        size: usize,
        height: usize,
        width: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("training diverged at iteration {iter}: {what}")]
    Diverged { iter: usize, what: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
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
