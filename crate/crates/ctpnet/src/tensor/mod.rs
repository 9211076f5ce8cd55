//! Dense float64 tensors with tape-free reverse-mode automatic differentiation.
//!
//! Every op builds a new immutable node that holds its inputs by reference
//! counting; `backward` walks the resulting graph in reverse topological
//! order and accumulates gradients into each node's grad slot. Only nodes
//! reachable from a tracked leaf record their parents, so inference-only
//! subgraphs collapse to constants.

mod backward;
mod ops;
mod param;

pub use param::Parameter;

use std::sync::{Arc, Mutex};

use crate::error::{fmt_shape, Error, Result};

/// Handle to an immutable tensor node. Cloning is cheap (reference bump).
#[derive(Clone)]
pub struct Tensor {
    node: Arc<Node>,
}

pub(crate) struct Node {
    pub(crate) data: Vec<f64>,
    pub(crate) shape: Vec<usize>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Mutex<Option<Vec<f64>>>,
    pub(crate) op: Op,
}

/// Recorded provenance of a node, used to replay the chain rule.
pub(crate) enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    AddScalar(Tensor),
    MulScalar(Tensor, f64),
    MatMul(Tensor, Tensor),
    TransposeLastTwo(Tensor),
    Reshape(Tensor),
    SliceAxis {
        input: Tensor,
        axis: usize,
        start: usize,
    },
    ConcatAxis {
        parts: Vec<Tensor>,
        axis: usize,
    },
    SoftmaxLast(Tensor),
    LayerNormLast {
        input: Tensor,
        scale: Tensor,
        shift: Tensor,
        eps: f64,
    },
    Gelu(Tensor),
    Abs(Tensor),
    MeanAll(Tensor),
    SumAll(Tensor),
    /// out[b, r, j] = table[r, cols[b * seq_len + j]]
    GatherColumns {
        table: Tensor,
        cols: Vec<usize>,
        seq_len: usize,
    },
}

impl Tensor {
    /// Leaf tensor without gradient tracking. Rejects non-finite values.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Tensor::leaf(data, shape, false)
    }

    /// Leaf tensor, optionally tracked by the autograd graph.
    pub fn leaf(data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {} needs {} elements, got {}",
                fmt_shape(shape),
                numel,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!(
                "zero extent in shape {}",
                fmt_shape(shape)
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch(format!(
                "non-finite value {bad} in tensor data"
            )));
        }
        Ok(Tensor {
            node: Arc::new(Node {
                data,
                shape: shape.to_vec(),
                requires_grad,
                grad: Mutex::new(None),
                op: Op::Leaf,
            }),
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::leaf(vec![0.0; numel], shape, false).expect("zeros: valid shape")
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![v], &[1]).expect("scalar: finite value")
    }

    /// Internal constructor for op outputs. Parents are dropped when the
    /// result does not require grad so constant subgraphs stay flat.
    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op) -> Tensor {
        let requires_grad = op_requires_grad(&op);
        let op = if requires_grad { op } else { Op::Leaf };
        Tensor {
            node: Arc::new(Node {
                data,
                shape,
                requires_grad,
                grad: Mutex::new(None),
                op,
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.node.data
    }

    /// Value of a one-element tensor.
    ///
    /// Panics when the tensor has more than one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor with {} elements", self.numel());
        self.node.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Accumulated gradient, if `backward` has reached this node.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.lock().expect("grad lock").clone()
    }

    pub fn clear_grad(&self) {
        *self.node.grad.lock().expect("grad lock") = None;
    }

    pub(crate) fn ptr(&self) -> *const Node {
        Arc::as_ptr(&self.node)
    }

    pub(crate) fn accumulate_grad(&self, contrib: &[f64]) {
        let mut slot = self.node.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("data", &self.node.data)
            .finish()
    }
}

fn op_requires_grad(op: &Op) -> bool {
    match op {
        Op::Leaf => false,
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => {
            a.requires_grad() || b.requires_grad()
        }
        Op::AddScalar(a)
        | Op::MulScalar(a, _)
        | Op::TransposeLastTwo(a)
        | Op::Reshape(a)
        | Op::SoftmaxLast(a)
        | Op::Gelu(a)
        | Op::Abs(a)
        | Op::MeanAll(a)
        | Op::SumAll(a) => a.requires_grad(),
        Op::SliceAxis { input, .. } => input.requires_grad(),
        Op::ConcatAxis { parts, .. } => parts.iter().any(|p| p.requires_grad()),
        Op::LayerNormLast {
            input,
            scale,
            shift,
            ..
        } => input.requires_grad() || scale.requires_grad() || shift.requires_grad(),
        Op::GatherColumns { table, .. } => table.requires_grad(),
    }
}
