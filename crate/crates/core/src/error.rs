use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("softmax row {row} is fully masked")]
    DegenerateRow { row: usize },

    #[error("query {row} has a zero kernel normalizer")]
    DegenerateQuery { row: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("token id {id} outside vocabulary of size {size}")]
    Vocab { id: usize, size: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("matrix is singular: {0}")]
    Singular(String),

    #[error("cannot diagonalize: {0}")]
    Diagonalization(String),

    #[error("integer accumulator overflow in quantized matmul")]
    Overflow,

    #[error("sequence of length {len} exceeds capacity {cap}")]
    Capacity { len: usize, cap: usize },

    #[error("decoder state error: {0}")]
    State(String),

    #[error("encoder input is empty")]
    EmptySource,

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape {
        op,
        detail: detail.into(),
    })
}
