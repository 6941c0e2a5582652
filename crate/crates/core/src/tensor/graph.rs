use std::sync::Arc;

use super::kernels::ConvGeom;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics; the node records them for a running update.
    Train,
    /// Normalize with the supplied running statistics.
    Eval,
}

/// Exponential moving averages of per-channel mean and variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![0.0; channels], var: vec![1.0; channels], momentum: 0.1 }
    }

    /// Folds in batch statistics; `var` is the biased batch variance over `count` values.
    pub fn update(&mut self, mean: &[f64], var: &[f64], count: usize) {
        let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        let m = self.momentum;
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - m) * self.mean[c] + m * mean[c];
            self.var[c] = (1.0 - m) * self.var[c] + m * var[c] * unbias;
        }
    }
}

/// Operation tag of a graph node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    Sum,
    Mean,
    Relu,
    Reshape,
    Permute,
    TransposeLast2,
    Concat,
    Matmul,
    Linear,
    Conv2d,
    MaxPool2d,
    AvgPool2d,
    GlobalAvgPool,
    BatchNorm2d,
    Softmax,
    CrossEntropy,
    GatherCols,
    ScatterCols,
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    TransposeLast2(Var),
    Concat { xs: Vec<Var>, axis: usize },
    Matmul { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    AvgPool2d { x: Var, kernel: usize, stride: usize },
    GlobalAvgPool(Var),
    BatchNorm2d { x: Var, gamma: Var, beta: Var, saved: BnSaved },
    Softmax { x: Var, axis: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    GatherCols { x: Var, index: Arc<[usize]> },
    ScatterCols { x: Var, index: Arc<[usize]>, width: usize },
}

pub(crate) struct BnSaved {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Present in train mode: (batch mean, biased batch variance, values per channel).
    pub batch: Option<(Vec<f64>, Vec<f64>, usize)>,
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Relu(_) => OpKind::Relu,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::TransposeLast2(_) => OpKind::TransposeLast2,
            Op::Concat { .. } => OpKind::Concat,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::AvgPool2d { .. } => OpKind::AvgPool2d,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::BatchNorm2d { .. } => OpKind::BatchNorm2d,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::GatherCols { .. } => OpKind::GatherCols,
            Op::ScatterCols { .. } => OpKind::ScatterCols,
        }
    }

    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Relu(x)
            | Op::Reshape(x)
            | Op::TransposeLast2(x)
            | Op::GlobalAvgPool(x) => vec![*x],
            Op::Permute { x, .. }
            | Op::MaxPool2d { x, .. }
            | Op::AvgPool2d { x, .. }
            | Op::Softmax { x, .. }
            | Op::GatherCols { x, .. }
            | Op::ScatterCols { x, .. } => vec![*x],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Matmul { a, b } => vec![*a, *b],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::BatchNorm2d { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

pub(crate) struct Node {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub requires_grad: bool,
    pub op: Op,
}

/// A tape of tensor operations recorded in creation order.
///
/// Node inputs always precede the node itself, so the creation order is a
/// topological order and [`Graph::backward`] walks it in reverse.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Batch mean / biased variance / per-channel count recorded by a train-mode batch norm.
    pub fn bn_batch_stats(&self, v: Var) -> Option<(&[f64], &[f64], usize)> {
        match &self.nodes[v.0].op {
            Op::BatchNorm2d { saved, .. } => {
                saved.batch.as_ref().map(|(m, s, n)| (m.as_slice(), s.as_slice(), *n))
            }
            _ => None,
        }
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Leaf gradients accumulate with `+=` across sweeps until
    /// [`Graph::zero_grads`]; intermediate gradients hold the latest sweep only.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarBackward(shape));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        self.accumulate(loss, Tensor::full(&shape, 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            if self.nodes[i].op.inputs().iter().any(|v| v.0 >= i) {
                return Err(Error::GraphCycle(i));
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.backward_node(i, &grad);
            self.nodes[i].grad = Some(grad);
            for (v, g) in contributions {
                if self.nodes[v.0].requires_grad {
                    self.accumulate(v, g);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        let node = &mut self.nodes[v.0];
        debug_assert_eq!(node.value.shape(), g.shape());
        match &mut node.grad {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    pub(crate) fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}
