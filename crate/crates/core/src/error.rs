use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node}: {msg}")]
    Shape { node: usize, msg: String },
    #[error("numeric fault: non-finite value produced by {kind} at node {node}")]
    NonFinite { node: usize, kind: &'static str },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("length error: expected {expected} bytes of payload, found {found}")]
    Length { expected: usize, found: usize },
    #[error("training diverged: loss {loss} at iteration {iteration}")]
    Diverged { iteration: usize, loss: f64 },
    #[error("undefined metric ({0})")]
    UndefinedMetric(&'static str),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}
