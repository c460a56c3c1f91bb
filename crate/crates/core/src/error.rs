use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("gradient check aborted: {0}")]
    NonDeterministic(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("missing file for sample `{sample}`: {path}")]
    MissingFile { sample: String, path: PathBuf },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} (largest gradient magnitude in `{parameter}`)"
    )]
    NumericalAbort {
        epoch: usize,
        batch: usize,
        parameter: String,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
