//! Dense f64 tensor arithmetic with reverse-mode automatic differentiation,
//! the neural layers used by the classifier (linear via matmul, softmax,
//! sigmoid, batch normalization, feed-forward pieces), cross-entropy loss,
//! and an Adam optimizer.
//!
//! Everything is 64-bit and strictly deterministic: no threads, no global
//! state, seeded randomness only through [`rng::SplitMix64`].

mod graph;
mod optim;
mod tensor;

pub mod gradcheck;
pub mod rng;

pub use graph::{Graph, NodeId};
pub use optim::Adam;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("tensor shape {shape:?} does not hold {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("probability row {row} sums to {sum}, expected 1")]
    UnnormalizedProbs { row: usize, sum: f64 },
    #[error("batch norm needs at least 2 rows in train mode")]
    SingletonBatch,
}

pub type Result<T> = std::result::Result<T, NumericsError>;
