//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records operations symbolically. [`Graph::forward`] evaluates
//! every node reachable from a root and caches the values, and
//! [`Graph::backward`] walks the same nodes in reverse id order to accumulate
//! gradients into the leaves. Leaf values can be replaced between passes,
//! which is how finite-difference checks re-evaluate the graph.

mod graph;
mod tensor;

pub use graph::{CustomGrad, Gradients, Graph, NodeId, OpKind};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("backward root must be scalar, node {node} has shape {shape:?}")]
    NonScalarRoot { node: usize, shape: Vec<usize> },
    #[error("backward called before forward for node {0}")]
    NotEvaluated(usize),
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("node {0} is not a leaf")]
    NotALeaf(usize),
    #[error("unknown node {0}")]
    UnknownNode(usize),
}
