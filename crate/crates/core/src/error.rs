use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("backward requires a scalar loss node, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown graph node id {0}")]
    UnknownNode(usize),
    #[error("missing gradient for parameter {0:?}")]
    MissingGradient(String),
    #[error("non-finite loss at episode {episode}, step {step} (seed {seed})")]
    NonFiniteLoss {
        episode: usize,
        step: usize,
        seed: u64,
    },
    #[error("{0}")]
    InvalidConfig(String),
    #[error("data format error in {path}: {reason}")]
    DataFormat { path: String, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn data(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::DataFormat {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
