//! Dense tensor math, reverse-mode gradients and the optimizer.

mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{Graph, Var};
pub use optim::{noam_lr, AdamConfig, OptimizerState, UpdateMask};
pub use params::{Gradients, Param, ParamId, ParamStore};
pub use tensor::{layer_norm, logsumexp, matmul, softmax_rows, Tensor};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NumericError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op} expects a matrix, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("shape {shape:?} does not match {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: expected length {expected}, got {actual}")]
    LengthMismatch {
        op: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: index {index} out of range for length {len}")]
    OutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("layer norm needs at least 2 columns, got {0}")]
    DegenerateRow(usize),
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("attention mask keeps {valid} of {cols} columns")]
    InvalidMask { valid: usize, cols: usize },
    #[error("learning-rate schedule is defined from step 1, got step {step} (warmup {warmup})")]
    InvalidStep { step: u64, warmup: u64 },
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
}
