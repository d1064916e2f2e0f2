use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ShapeError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shapes {0:?} and {1:?} do not broadcast")]
    Broadcast(Vec<usize>, Vec<usize>),
    #[error("cannot reshape {0:?} into {1:?}")]
    Reshape(Vec<usize>, Vec<usize>),
    #[error("invalid axes {1:?} for shape {0:?}")]
    Axes(Vec<usize>, Vec<usize>),
    #[error("expected at least rank {expected}, got shape {got:?}")]
    Rank { expected: usize, got: Vec<usize> },
    #[error("narrow out of range: shape {shape:?}, axis {axis}, start {start}, len {len}")]
    Narrow { shape: Vec<usize>, axis: usize, start: usize, len: usize },
    #[error("cannot concatenate {0:?} with {1:?}")]
    Concat(Vec<usize>, Vec<usize>),
    #[error("incompatible matmul operands {0:?} x {1:?}")]
    Matmul(Vec<usize>, Vec<usize>),
    #[error("empty operand list")]
    Empty,
    #[error("parameter `{0}` is not registered")]
    UnknownParam(String),
    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    ParamShape { name: String, expected: Vec<usize>, got: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, ShapeError>;
