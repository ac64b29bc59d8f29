use std::sync::Arc;

use super::pool::PoolIndices;
use super::{numel, ops::Rect, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(super) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Kind of a recorded operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Relu,
    Abs,
    MaxPool,
    MaxUnpool,
    Softmax,
    MatMul,
    Add,
    Sub,
    Scale,
    MeanAll,
    Concat,
    SliceChannels,
    RegionMatrix,
    AssembleRegions,
    ReflectPad,
    Crop,
}

impl OpKind {
    pub const ALL: [OpKind; 18] = [
        OpKind::Leaf,
        OpKind::Conv2d,
        OpKind::Relu,
        OpKind::Abs,
        OpKind::MaxPool,
        OpKind::MaxUnpool,
        OpKind::Softmax,
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Scale,
        OpKind::MeanAll,
        OpKind::Concat,
        OpKind::SliceChannels,
        OpKind::RegionMatrix,
        OpKind::AssembleRegions,
        OpKind::ReflectPad,
        OpKind::Crop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::Relu => "relu",
            OpKind::Abs => "abs",
            OpKind::MaxPool => "maxpool2d",
            OpKind::MaxUnpool => "maxunpool2d",
            OpKind::Softmax => "softmax",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Scale => "scale",
            OpKind::MeanAll => "mean_all",
            OpKind::Concat => "concat_channels",
            OpKind::SliceChannels => "slice_channels",
            OpKind::RegionMatrix => "region_matrix",
            OpKind::AssembleRegions => "assemble_regions",
            OpKind::ReflectPad => "reflect_pad",
            OpKind::Crop => "crop",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Clone, Debug)]
pub(super) enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu(Var),
    Abs(Var),
    MaxPool {
        input: Var,
        indices: Arc<PoolIndices>,
    },
    MaxUnpool {
        input: Var,
        indices: Arc<PoolIndices>,
    },
    Softmax(Var),
    MatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    MeanAll(Var),
    Concat(Vec<Var>),
    SliceChannels {
        input: Var,
        start: usize,
    },
    RegionMatrix {
        input: Var,
        batch: usize,
        rect: Rect,
    },
    AssembleRegions {
        parts: Vec<Var>,
        rects: Arc<Vec<Rect>>,
    },
    ReflectPad(Var),
    Crop(Var),
}

impl Op {
    pub(super) fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu(_) => OpKind::Relu,
            Op::Abs(_) => OpKind::Abs,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::MaxUnpool { .. } => OpKind::MaxUnpool,
            Op::Softmax(_) => OpKind::Softmax,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Scale(..) => OpKind::Scale,
            Op::MeanAll(_) => OpKind::MeanAll,
            Op::Concat(_) => OpKind::Concat,
            Op::SliceChannels { .. } => OpKind::SliceChannels,
            Op::RegionMatrix { .. } => OpKind::RegionMatrix,
            Op::AssembleRegions { .. } => OpKind::AssembleRegions,
            Op::ReflectPad(_) => OpKind::ReflectPad,
            Op::Crop(_) => OpKind::Crop,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, weight, bias } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::Relu(x)
            | Op::Abs(x)
            | Op::Softmax(x)
            | Op::Scale(x, _)
            | Op::MeanAll(x)
            | Op::ReflectPad(x)
            | Op::Crop(x) => vec![*x],
            Op::MaxPool { input, .. }
            | Op::MaxUnpool { input, .. }
            | Op::SliceChannels { input, .. }
            | Op::RegionMatrix { input, .. } => vec![*input],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) => vec![*a, *b],
            Op::Concat(parts) | Op::AssembleRegions { parts, .. } => parts.clone(),
        }
    }
}

pub(super) struct Node<T> {
    pub(super) value: Tensor<T>,
    pub(super) op: Op,
    pub(super) requires_grad: bool,
}

/// Recorded computation graph.
///
/// Nodes are appended in creation order, so the node list is always a
/// topological order. A graph is meant to live for one forward/backward
/// pass; build a fresh one per training step.
pub struct Graph<T> {
    pub(super) nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
    fault: Option<OpKind>,
    branches: Option<u64>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            fault: None,
            branches: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// A trainable leaf; [`Graph::backward`] accumulates its gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub(super) fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.grad(v)
            .map(|g| Tensor::new(self.shape(v), g.to_vec()).expect("grad shape matches value"))
    }

    /// Resets every accumulated leaf gradient to zero.
    pub fn zero_grads(&mut self) {
        for g in self.leaf_grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Deliberately corrupts the backward rule of one op kind (gradients
    /// scaled by 1.5). Used to prove the gradient checker catches errors.
    pub fn inject_backward_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    /// Start hashing every piecewise branch decision (ReLU/abs signs,
    /// pooling argmaxes) taken by subsequently recorded ops.
    pub fn track_branches(&mut self) {
        self.branches.get_or_insert(0xcbf2_9ce4_8422_2325);
    }

    /// Hash of all branch decisions so far. Two evaluations with equal
    /// signatures lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> Option<u64> {
        self.branches
    }

    pub(super) fn tracking_branches(&self) -> bool {
        self.branches.is_some()
    }

    pub(super) fn note_branches(&mut self, bits: impl Iterator<Item = u64>) {
        if let Some(h) = self.branches.as_mut() {
            for b in bits {
                *h = (*h ^ b).wrapping_mul(FNV_PRIME);
            }
        }
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Leaf gradients accumulate across calls until [`Graph::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if numel(&shape) != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let Graph {
            nodes,
            leaf_grads,
            fault,
            ..
        } = self;
        let fault_scale = T::from_f64(1.5);

        for id in (0..=loss.0).rev() {
            let Some(mut g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut leaf_grads[id] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            if *fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v = *v * fault_scale);
            }
            let mut sink = GradSink {
                nodes,
                grads: &mut grads,
            };
            backward_op(&node.op, &node.value, &g, &mut sink);
        }
        Ok(())
    }
}

/// Lazily allocated gradient buffers for one backward sweep.
pub(super) struct GradSink<'a, T> {
    pub(super) nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<'a, T: Scalar> GradSink<'a, T> {
    pub(super) fn value(&self, v: Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }

    pub(super) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Runs `f` on the gradient buffer of `v` (zero-initialized on first use).
    pub(super) fn with(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if !self.wants(v) {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let buf = self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(buf);
    }

    pub(super) fn add(&mut self, v: Var, g: &[T]) {
        self.with(v, |buf| buf.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b));
    }
}

fn backward_op<T: Scalar>(op: &Op, out: &Tensor<T>, g: &[T], sink: &mut GradSink<'_, T>) {
    use super::{conv, ops, pool};
    match op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            weight,
            bias,
        } => conv::conv2d_backward(*input, *weight, *bias, g, sink),
        Op::Relu(x) => ops::relu_backward(*x, g, sink),
        Op::Abs(x) => ops::abs_backward(*x, g, sink),
        Op::MaxPool { input, indices } => pool::maxpool_backward(*input, indices, g, sink),
        Op::MaxUnpool { input, indices } => pool::maxunpool_backward(*input, indices, g, sink),
        Op::Softmax(x) => ops::softmax_backward(*x, out, g, sink),
        Op::MatMul { a, b, transpose_b } => ops::matmul_backward(*a, *b, *transpose_b, g, sink),
        Op::Add(a, b) => {
            sink.add(*a, g);
            sink.add(*b, g);
        }
        Op::Sub(a, b) => {
            sink.add(*a, g);
            sink.with(*b, |buf| buf.iter_mut().zip(g).for_each(|(d, &v)| *d = *d - v));
        }
        Op::Scale(x, s) => {
            let s = T::from_f64(*s);
            sink.with(*x, |buf| buf.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v * s));
        }
        Op::MeanAll(x) => {
            let n = sink.value(*x).len();
            let share = g[0] / T::from_f64(n as f64);
            sink.with(*x, |buf| buf.iter_mut().for_each(|d| *d = *d + share));
        }
        Op::Concat(parts) => ops::concat_backward(parts, out, g, sink),
        Op::SliceChannels { input, start } => ops::slice_backward(*input, *start, out, g, sink),
        Op::RegionMatrix { input, batch, rect } => {
            ops::region_matrix_backward(*input, *batch, *rect, g, sink)
        }
        Op::AssembleRegions { parts, rects } => ops::assemble_backward(parts, rects, out, g, sink),
        Op::ReflectPad(x) => ops::reflect_pad_backward(*x, out, g, sink),
        Op::Crop(x) => ops::crop_backward(*x, out, g, sink),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros([1, 1, 2, 2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn mean_gives_uniform_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn([2, 3, 2, 2], |[a, b, c, d]| (a + b + c + d) as f64));
        let m = g.mean_all(x);
        g.backward(m).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0 / 24.0));
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full([1, 1, 1, 4], 2.0));
        let m = g.mean_all(x);
        g.backward(m).unwrap();
        g.backward(m).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 0.5));
        g.zero_grads();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 0.0));
        g.backward(m).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::full([1, 1, 1, 2], 1.0));
        let x = g.param(Tensor::full([1, 1, 1, 2], 3.0));
        let s = g.add(c, x).unwrap();
        let m = g.mean_all(s);
        g.backward(m).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn fan_out_sums_contributions() {
        // loss = mean(x + x * 3) => dx = 4 / n
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full([1, 1, 1, 2], 1.0));
        let y = g.scale(x, 3.0);
        let s = g.add(x, y).unwrap();
        let m = g.mean_all(s);
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn op_names_round_trip() {
        for k in OpKind::ALL {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
