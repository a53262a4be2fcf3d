use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid token {token} (vocabulary size {vocab})")]
    InvalidToken { token: usize, vocab: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("operation requires a {expected} model")]
    Variant { expected: &'static str },

    #[error("transcript unreachable in alignment lattice (T={frames}, U={labels})")]
    Unreachable { frames: usize, labels: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("lattice too large to enumerate: T + U = {0} > 20")]
    TooLarge(usize),

    #[error("audit failed: {0}")]
    Audit(String),

    #[error("malformed container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
