use thiserror::Error;

/// Errors raised by tensor-train construction, arithmetic and solvers.
#[derive(Debug, Error)]
pub enum QttError {
    #[error("index {index} out of range for extent {extent}")]
    Range { index: usize, extent: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("capacity exceeded: {requested} scalars requested, guard is {limit}")]
    Capacity { requested: usize, limit: usize },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("matrix is singular to working precision (pivot {pivot_index} = {pivot:e}, largest pivot {max_pivot:e})")]
    Singular {
        pivot_index: usize,
        pivot: f64,
        max_pivot: f64,
    },

    #[error("malformed TTB1 stream: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, QttError>;
