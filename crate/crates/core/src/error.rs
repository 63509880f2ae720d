use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("matrix is not positive definite: pivot {pivot} has value {value:e}")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("singular system in {op}: diagonal entry {index} is {value:e}")]
    Singular {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(
    op: &'static str,
    expected: impl Into<String>,
    got: impl Into<String>,
) -> Error {
    Error::Shape {
        op,
        expected: expected.into(),
        got: got.into(),
    }
}
