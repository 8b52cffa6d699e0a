use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("conflict: {0}")]
    Conflict(String),

    /// The operation is not allowed in the session's current lifecycle state.
    #[error("wrong state: {0}")]
    WrongState(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("failed to load {}: {reason}", path.display())]
    Load { path: PathBuf, reason: String },

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("backbone mismatch: session was taught with {expected}, got {found}")]
    Compatibility { expected: String, found: String },

    #[error("parse error{}: {detail}", offset.map(|o| format!(" at byte {o}")).unwrap_or_default())]
    Parse { offset: Option<usize>, detail: String },

    #[error("image decode failed: {0}")]
    Decode(String),

    #[error("training cancelled")]
    Cancelled,

    #[error("inference failed: {0}")]
    Inference(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable code used on the wire.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NotFound(_) => "not_found",
            Error::Conflict(_) => "conflict",
            Error::WrongState(_) => "wrong_state",
            Error::Precondition(_) => "precondition",
            Error::Load { .. } => "load",
            Error::UnsupportedModel(_) => "unsupported_model",
            Error::Compatibility { .. } => "incompatible",
            Error::Parse { .. } => "parse",
            Error::Decode(_) => "decode",
            Error::Cancelled => "cancelled",
            Error::Inference(_) => "inference",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
