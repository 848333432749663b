//! Wengert tape: append-only operation record and the reverse pass.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Error, Result};

use super::ops::Op;
use super::Tensor;

/// Handle into the tape's node list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// One recorded operation: kind, inputs (with saved activations), output.
pub(crate) struct Node {
    pub op: Op,
    pub inputs: Vec<NodeInput>,
    pub out: Arc<Vec<f64>>,
}

pub(crate) struct NodeInput {
    /// `None` for constants mixed into a tracked computation.
    pub node: Option<NodeId>,
    pub value: Arc<Vec<f64>>,
}

/// Single-writer tape; create one per forward pass.
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register a tracked leaf. Gradients accumulate into it during
    /// [`Tape::backward`]; the returned tensor shares the input's storage.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        let id = self.push(Op::Leaf, Vec::new(), t.arc_data());
        Tensor::with_node(t.shape().to_vec(), t.arc_data(), Some(id))
    }

    pub(crate) fn push(&self, op: Op, inputs: Vec<NodeInput>, out: Arc<Vec<f64>>) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len());
        nodes.push(Node { op, inputs, out });
        id
    }

    /// Reverse pass from a scalar output. Every node between the output and
    /// the leaves is visited exactly once, in reverse construction order.
    /// A constant output (nothing tracked) yields an empty gradient map.
    pub fn backward(&self, out: &Tensor) -> Result<Gradients> {
        if out.numel() != 1 {
            return Err(Error::NonScalarBackward {
                shape: out.shape().to_vec(),
            });
        }
        let Some(root) = out.node_id() else {
            return Ok(Gradients { grads: Vec::new() });
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for nid in (0..=root.0).rev() {
            if grads[nid].is_none() {
                continue;
            }
            let g = grads[nid].take().unwrap();
            let node = &nodes[nid];
            node.op.vjp(&node.inputs, &node.out, &g, &mut grads);
            grads[nid] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Result of a reverse pass: per-node gradient buffers.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to a tracked tensor. Tracked leaves the output
    /// never touched get zeros; untracked tensors get `None`.
    pub fn wrt(&self, t: &Tensor) -> Option<Vec<f64>> {
        let id = t.node_id()?;
        match self.grads.get(id.0) {
            Some(Some(g)) => Some(g.clone()),
            _ => Some(vec![0.0; t.numel()]),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Accumulate `delta` into the gradient slot of `target`, if tracked.
pub(crate) fn accumulate(
    grads: &mut [Option<Vec<f64>>],
    target: Option<NodeId>,
    delta: &[f64],
) {
    let Some(id) = target else { return };
    match &mut grads[id.0] {
        Some(buf) => {
            debug_assert_eq!(buf.len(), delta.len());
            for (b, d) in buf.iter_mut().zip(delta) {
                *b += d;
            }
        }
        slot @ None => *slot = Some(delta.to_vec()),
    }
}
