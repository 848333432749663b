//! Dense f64 tensor engine with reverse-mode autodiff.
//!
//! Tensors are immutable after construction. Math goes through [`Tape`]
//! methods; when any input of an operation is tape-tracked the output is
//! tracked too, otherwise nothing is recorded and the call is a plain
//! computation. One tape per forward pass. All reductions run sequentially
//! left-to-right by flat index, so repeated evaluation is bit-identical.

mod fd;
mod ops;
mod tape;

pub use fd::{finite_diff_check, FdEntry, FdReport, DEFAULT_FD_STEP};
pub use ops::NormOrder;
pub use tape::{Gradients, NodeId, Tape};

/// Scalar logistic function, shared with tests and oracles.
pub fn sigmoid_scalar(x: f64) -> f64 {
    ops::sigmoid(x)
}

use std::sync::Arc;

use crate::error::{Error, Result};

/// N-dimensional row-major array of f64 values.
///
/// `node` is the tape handle; `None` means the tensor is a constant as far
/// as differentiation is concerned.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeId>,
}

impl Tensor {
    /// Build a tensor, validating extent/length agreement and finiteness.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                left: shape,
                right: vec![data.len()],
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "from_vec",
                index,
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::from_vec(vec![1], vec![value])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![0.0; numel]),
            node: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![value; numel])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn arc_data(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub(crate) fn with_node(
        shape: Vec<usize>,
        data: Arc<Vec<f64>>,
        node: Option<NodeId>,
    ) -> Self {
        Tensor { shape, data, node }
    }
}

/// Row-major flat index for a 4D tensor.
#[inline]
pub(crate) fn idx4(dims: [usize; 4], x: usize, y: usize, z: usize, c: usize) -> usize {
    ((x * dims[1] + y) * dims[2] + z) * dims[3] + c
}
