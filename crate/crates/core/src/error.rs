use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not conform for the requested operation.
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    /// A layer/model configuration violates one of its invariants.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Dataset, manifest or label problems.
    #[error("data error: {0}")]
    Data(String),

    /// A non-finite value was produced or a numeric contract was violated.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Recurrent state misuse (backward without forward, wrong window length).
    #[error("sequence error: {0}")]
    Sequence(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
