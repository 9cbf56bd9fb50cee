use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("enumeration horizon {requested} exceeds the bound of {limit}")]
    HorizonTooLarge { requested: usize, limit: usize },

    #[error("degenerate process: stop probability per round is {0:e}, the policy never stops")]
    DegenerateProcess(f64),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
