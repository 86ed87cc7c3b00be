use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, extents, axes or ranges that do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Input values outside their allowed domain (labels, targets).
    #[error("validation error: {0}")]
    Validation(String),

    /// Misuse of an API contract, e.g. backward on a non-scalar.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    /// Operation requires state that has not been produced yet.
    #[error("state error: {0}")]
    State(String),

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
