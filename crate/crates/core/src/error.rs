use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    #[error("{op}: input outside the domain of the function")]
    Domain { op: &'static str },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward: graph already consumed")]
    GraphConsumed,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("not a checkpoint")]
    NotACheckpoint,

    #[error("corrupt checkpoint: CRC mismatch")]
    Corrupt,

    #[error("unsupported checkpoint version {0}")]
    UnknownVersion(u32),

    #[error("malformed checkpoint: {0}")]
    Malformed(String),

    #[error("incompatible model: {0}")]
    IncompatibleModel(String),

    #[error("{path}: non-RGB image ({detail})")]
    NonRgb { path: PathBuf, detail: String },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: png::DecodingError,
    },

    #[error("{path}: {source}")]
    ImageEncode {
        path: PathBuf,
        #[source]
        source: png::EncodingError,
    },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn file(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::File {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
