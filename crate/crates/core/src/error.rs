use thiserror::Error;

pub type Result<T> = std::result::Result<T, DcdcError>;

#[derive(Debug, Error)]
pub enum DcdcError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate vector (norm below {eps:e}) at {what} {index}")]
    Degenerate {
        what: &'static str,
        index: usize,
        eps: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DcdcError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        DcdcError::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        DcdcError::Config(msg.into())
    }
}
