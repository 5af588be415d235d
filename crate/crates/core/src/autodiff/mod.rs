//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are appended
//! in evaluation order, so the node index is a topological order and backward
//! is a single reverse sweep.

mod backward;
pub mod kernels;
mod ops;

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::param::ParamSet;
use crate::real::Real;
use crate::tensor::Tensor;

pub use kernels::ConvGeometry;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization statistics source for [`Graph::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a> {
    /// Normalize with the batch's own statistics.
    Train,
    /// Normalize with fixed running statistics.
    Eval { mean: &'a [Real], var: &'a [Real] },
}

/// Per-channel statistics of a training-mode batch norm call. `var` is the
/// unbiased estimate, the one folded into running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<Real>,
    pub var: Vec<Real>,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    BatchMatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBroadcast(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, Real),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Conv2d {
        x: NodeId,
        w: NodeId,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<Real>,
        inv_std: Vec<Real>,
        train: bool,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<Real>,
        inv_std: Vec<Real>,
    },
    Softmax(NodeId),
    Gelu(NodeId),
    Relu(NodeId),
    GlobalAvgPool(NodeId),
    Concat {
        a: NodeId,
        b: NodeId,
        axis: usize,
    },
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    Expand(NodeId),
    Sum(NodeId),
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<Real>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers every tensor of `set` as a gradient-receiving leaf.
    pub fn params(&mut self, set: &ParamSet) -> Vec<NodeId> {
        set.iter().map(|p| self.param(p.value.clone())).collect()
    }

    /// Registers every tensor of `set` as a constant.
    pub fn constants(&mut self, set: &ParamSet) -> Vec<NodeId> {
        set.iter().map(|p| self.constant(p.value.clone())).collect()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `id`, if `id` is a
    /// leaf that was reached.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }

    pub fn grads_of(&self, ids: &[NodeId]) -> Vec<Option<Tensor>> {
        ids.iter().map(|&id| self.grad(id).cloned()).collect()
    }

    /// Sign pattern of every ReLU input on the tape, in evaluation order.
    /// Two evaluations of the same computation with equal patterns lie on the
    /// same linear piece of every ReLU, which finite-difference checks need.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(input) = node.op {
                out.extend(self.nodes[input.0].value.data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Backpropagates from a scalar loss.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let value = self.value(loss);
        if !value.is_scalar() {
            return Err(Error::NonScalarLoss(value.shape().to_vec()));
        }
        let seed = Tensor::ones(value.shape());
        self.backward_from(loss, seed)
    }

    /// Backpropagates an upstream gradient `seed` arriving at `root`. Used at
    /// split points where the rest of the chain lives in another graph.
    pub fn backward_from(&mut self, root: NodeId, seed: Tensor) -> Result<()> {
        let root_shape = self.value(root).shape();
        if root_shape != seed.shape() {
            return Err(Error::shape("backward_from", root_shape, seed.shape()));
        }
        if !seed.all_finite() {
            return Err(Error::NonFinite(alloc::string::String::from("upstream gradient")));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            } else {
                backward::propagate(&self.nodes[i].op, &self.nodes[i].value, &g, self, &mut grads);
            }
        }
        self.grads = grads;
        Ok(())
    }
}

pub(crate) fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing
            .add_assign(&g)
            .expect("gradient shape for a node never changes"),
        slot @ None => *slot = Some(g),
    }
}
