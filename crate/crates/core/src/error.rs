use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A value lies outside the domain an operation is defined on.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid parameter combination (e.g. an interval gap that leaves no room).
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("message of {bits} bits exceeds capacity of {capacity} bits")]
    Capacity { bits: usize, capacity: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no decodable images in {0}")]
    EmptyDataset(PathBuf),

    #[error("missing checkpoint at {0}")]
    MissingCheckpoint(PathBuf),

    #[error("corrupt checkpoint: parameter `{param}`: {reason}")]
    CorruptCheckpoint { param: String, reason: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("incompatible models: {0}")]
    Incompatible(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Tensor(#[from] grdh_autograd::Error),
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
