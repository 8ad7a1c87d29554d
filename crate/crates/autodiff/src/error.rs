use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("unknown tensor names in checkpoint: {unknown:?} (known: {known:?})")]
    UnknownTensor { unknown: Vec<String>, known: Vec<String> },

    #[error("missing tensors in checkpoint: {0:?}")]
    MissingTensor(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(AutodiffError::Shape(msg.into()))
}
