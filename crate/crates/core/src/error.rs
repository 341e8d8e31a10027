use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Every element of the tensor is zero, so no clipping threshold exists.
    #[error("degenerate tensor: all elements are zero")]
    DegenerateTensor,

    #[error("non-finite input at index {index}")]
    NonFiniteInput { index: usize },

    #[error("corrupt payload: {0}")]
    CorruptPayload(String),

    #[error("encode error: {0}")]
    Encode(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("format error: {0}")]
    Format(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("config error for key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier, used for machine-parsable CLI errors and FFI codes.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DegenerateTensor => "degenerate_tensor",
            Error::NonFiniteInput { .. } => "non_finite_input",
            Error::CorruptPayload(_) => "corrupt_payload",
            Error::Encode(_) => "encode",
            Error::Shape(_) => "shape",
            Error::EmptyDataset => "empty_dataset",
            Error::Format(_) => "format",
            Error::Partition(_) => "partition",
            Error::Config { .. } => "config",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Io { .. } => "io",
        }
    }
}
