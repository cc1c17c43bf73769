use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid specification: {0}")]
    Spec(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("numerical failure at iteration {iter} in step {step}: {msg}")]
    Step {
        iter: usize,
        step: &'static str,
        msg: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn spec<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Spec(msg.into()))
}
