//! Tape-based reverse-mode automatic differentiation over dense `f64`
//! matrices.
//!
//! A [`Graph`] records operations as they are applied, evaluating each one
//! eagerly. [`Graph::backward`] then sweeps the tape in reverse from a scalar
//! root and returns a [`Gradients`] map keyed by node and by [`Parameter`] id.
//!
//! Broadcasting is limited to matrix products and adding a `1 x cols` bias
//! row. Anything fancier is expressed as a [`CustomOp`].

mod gradcheck;
mod graph;
mod tensor;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{sigmoid, softplus, CustomOp, Gradients, Graph, NodeId};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op} (node {node:?}): {left:?} vs {right:?}")]
    ShapeMismatch {
        node: Option<usize>,
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },
    #[error("tensor of shape {shape:?} cannot hold {len} values")]
    BadLength { shape: [usize; 2], len: usize },
    #[error("column slice {start}..{end} out of range for {cols} columns (node {node})")]
    BadSlice {
        node: usize,
        start: usize,
        end: usize,
        cols: usize,
    },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot([usize; 2]),
    #[error("node {0} does not exist")]
    UnknownNode(usize),
    #[error("node {0} is not a leaf")]
    NotALeaf(usize),
    #[error("mean over an empty tensor (node {0})")]
    EmptyReduction(usize),
    #[error("graph is empty")]
    EmptyGraph,
    #[error("non-finite function value at coordinate {coordinate} of {parameter}")]
    NonFiniteValue {
        parameter: String,
        coordinate: usize,
    },
}

/// Trainable tensor with a stable identifier used for gradients, optimizer
/// state and checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub id: String,
    pub tensor: Tensor,
}

impl Parameter {
    pub fn new(id: impl Into<String>, tensor: Tensor) -> Self {
        Self {
            id: id.into(),
            tensor,
        }
    }
}
