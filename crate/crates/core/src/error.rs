use thiserror::Error;

pub type Result<T> = std::result::Result<T, FdnError>;

#[derive(Debug, Error)]
pub enum FdnError {
    #[error("invalid dimensions {0:?}: {1}")]
    InvalidDims(Vec<usize>, &'static str),

    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 4], [usize; 4]),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("divisor magnitude {0:e} below floor")]
    DivisionFloor(f64),

    #[error("invalid axis {0}")]
    InvalidAxis(usize),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("singular matrix (|det| = {0:e})")]
    Singular(f64),

    #[error("layer not initialized: {0}")]
    Uninitialized(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FdnError {
    pub(crate) fn pre(msg: impl Into<String>) -> Self {
        FdnError::Precondition(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        FdnError::Format(msg.into())
    }
}
