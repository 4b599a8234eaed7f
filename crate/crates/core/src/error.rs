use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("empty axis in {0}")]
    EmptyAxis(&'static str),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violated: {0}")]
    Contract(String),

    /// Malformed or inconsistent input data; `context` names the line or field.
    #[error("ingestion error at {context}: {message}")]
    Ingestion { context: String, message: String },

    #[error("capacity exceeded: {what} is {got}, limit {limit}")]
    Capacity {
        what: &'static str,
        limit: usize,
        got: usize,
    },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(
        "training diverged at step {step} (batch {batch}): loss {loss}, max |grad| {max_grad}"
    )]
    Diverged {
        step: usize,
        batch: usize,
        loss: f64,
        max_grad: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn ingestion(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Ingestion {
            context: context.into(),
            message: message.into(),
        }
    }

    pub(crate) fn contract(message: impl Into<String>) -> Self {
        Error::Contract(message.into())
    }
}
