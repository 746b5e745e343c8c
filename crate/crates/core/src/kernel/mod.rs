//! Dense `f64` tensors, normalization kernels and a reverse-mode tape.

mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, finite_diff_grad, GradCheckReport, RELATIVE_FLOOR};
pub use ops::{batch_norm, layer_norm, matmul, relu, RunningStats, BN_MOMENTUM, NORM_EPS};
pub use tape::{BatchStats, Gradients, Tape, Var};
pub use tensor::Tensor;


use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("shape {shape:?} does not hold {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: expected a matrix, got shape {shape:?}")]
    NotAMatrix { op: &'static str, shape: Vec<usize> },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("train-mode batch norm needs at least 2 rows, got {rows}")]
    DegenerateBatch { rows: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
}

/// Whether normalization layers use batch statistics or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
