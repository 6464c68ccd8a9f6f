use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported model kind: {0}")]
    UnsupportedModel(String),
    #[error("parameter constraint violated: {0}")]
    Constraint(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("geometry failure: {0}")]
    Geometry(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Usage-type errors (bad input) versus failures of a well-formed request.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::UnsupportedModel(_) | Error::Constraint(_) | Error::InvalidArgument(_) | Error::Format(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn geometry<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Geometry(msg.into()))
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
