use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("batchnorm in train mode needs at least 2 values per channel, got {0}")]
    BatchNormPopulation(usize),

    #[error("model config: {0}")]
    ModelConfig(String),

    #[error("config key `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("non-finite loss at step {step} (last finite: {last_finite})")]
    NonFiniteLoss { step: usize, last_finite: String },

    #[error("{what}: malformed at byte {offset}: {msg}")]
    Format { what: String, offset: usize, msg: String },

    #[error("{what}: truncated, expected {expected} bytes but found {found}")]
    Truncated {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("{path}: checksum mismatch (manifest {expected:08x}, file {actual:08x})")]
    Checksum { path: String, expected: u32, actual: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
