use thiserror::Error;

#[derive(Debug, Error)]
pub enum GciError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate LF shape: {0}")]
    DegenerateShape(String),

    #[error("solver did not converge: {0}")]
    Solver(String),

    #[error("failed to load {entry}: {reason}")]
    Load { entry: String, reason: String },

    #[error("training collapsed: {0}")]
    Collapse(String),

    #[error(transparent)]
    Autodiff(#[from] gci_autodiff::AutodiffError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GciError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(GciError::InvalidArgument(msg.into()))
}
