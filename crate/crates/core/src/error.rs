use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("precondition violated in {op}: {msg}")]
    Precondition { op: &'static str, msg: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("dataset error at {path}: {msg}")]
    Dataset { path: PathBuf, msg: String },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image codec error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
