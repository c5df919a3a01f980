use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid parameters or inputs that violate a documented precondition.
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at index {0}")]
    NonFinite(usize),

    #[error("window {0:?} does not intersect a {1}x{2} raster")]
    OutOfBounds(crate::raster::Window, usize, usize),

    #[error("pixel ({row}, {col}) is not covered by any patch")]
    CoverageGap { row: usize, col: usize },

    #[error("model backend failed: {0}")]
    Model(String),

    #[error("malformed frame: {0}")]
    Protocol(String),

    #[error("io error")]
    Io(#[from] std::io::Error),

    #[error("malformed json")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// True for errors caused by bad user input rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Invalid(_) | Error::Shape(_) | Error::NonFinite(_) | Error::OutOfBounds(..) | Error::Json(_)
        )
    }
}
