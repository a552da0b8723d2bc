use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the numeric engine, training code and file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("grid search failed: {0}")]
    Search(String),

    #[error("incompatible head/backbone: {0}")]
    Compatibility(String),

    #[error("missing labels: {0}")]
    MissingLabels(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Image(#[from] ImageError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Manifest(#[from] ManifestError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures while decoding a binary PGM image.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ImageError {
    #[error("bad magic: expected P5, found {0:?}")]
    BadMagic(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("unsupported bit depth: maxval {0} (only 255 is supported)")]
    UnsupportedDepth(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

/// Failures while loading a checkpoint file.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("corrupt checkpoint header: {0}")]
    Header(String),
    #[error("tensor {name}: expected shape {expected:?}, file has {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("truncated checkpoint payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

/// Failures while parsing a dataset manifest.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ManifestError {
    #[error("manifest line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
