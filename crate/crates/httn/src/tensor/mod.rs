//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The graph is a tape: an append-only list of op records. Each forward op
//! computes its result eagerly, validates finiteness, and records enough
//! state for the backward pass. `backward` walks the tape in reverse append
//! order exactly once, accumulating gradients into every node that needs
//! them. Element precision (f32/f64) is fixed per tape at construction via
//! the [`Element`] parameter.

use thiserror::Error;

mod conv;
mod elementwise;
mod gradcheck;
mod linalg;
mod norm;
mod shape;
mod shape_ops;

pub use gradcheck::{grad_check, CheckInput, GradCheckEntry, GradCheckReport};
pub use norm::BatchStats;
pub(crate) use shape::{broadcast_shape, broadcast_strides, contiguous_strides, zip_broadcast};

/// Floating-point element type a tape can be instantiated with.
pub trait Element:
    num_traits::Float
    + num_traits::NumAssign
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
    fn bytes() -> usize {
        std::mem::size_of::<Self>()
    }
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn into_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension error: {details}")]
    Dimension { op: &'static str, details: String },
    #[error("{op}: configuration error: {details}")]
    Config { op: &'static str, details: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

impl TensorError {
    fn dim(op: &'static str, details: impl Into<String>) -> Self {
        TensorError::Dimension { op, details: details.into() }
    }

    fn config(op: &'static str, details: impl Into<String>) -> Self {
        TensorError::Config { op, details: details.into() }
    }
}

/// Handle to a node on a tape. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Op record: kind, input node ids, and activations saved for backward.
#[derive(Debug, Clone)]
pub(crate) enum Op<E> {
    Leaf,
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: E },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    MatMul { a: NodeId, b: NodeId },
    TemporalConv1d { x: NodeId, w: NodeId, bias: NodeId },
    Conv2d { x: NodeId, w: NodeId, bias: Option<NodeId>, stride: usize, pad: usize },
    BatchNormTrain { x: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<E>, inv_std: Vec<E> },
    BatchNormEval { x: NodeId, gamma: NodeId, beta: NodeId, inv_std: Vec<E> },
    LayerNorm { x: NodeId, mean: Vec<E>, inv_std: Vec<E> },
    Softmax { x: NodeId },
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<E> },
    PairwiseSqDist { q: NodeId, p: NodeId },
    ReduceMean { x: NodeId, axes: Vec<usize> },
    Permute { x: NodeId, axes: Vec<usize> },
    Reshape { x: NodeId },
    IndexSelect { x: NodeId, axis: usize, indices: Vec<usize> },
    Concat { inputs: Vec<NodeId>, axis: usize },
}

impl<E> Op<E> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::MatMul { .. } => "matmul",
            Op::TemporalConv1d { .. } => "temporal_conv1d",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNormTrain { .. } => "batch_norm",
            Op::BatchNormEval { .. } => "batch_norm",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::PairwiseSqDist { .. } => "pairwise_sqdist",
            Op::ReduceMean { .. } => "reduce_mean",
            Op::Permute { .. } => "permute",
            Op::Reshape { .. } => "reshape",
            Op::IndexSelect { .. } => "index_select",
            Op::Concat { .. } => "concat",
        }
    }
}

/// One tape node: a dense value, its optional gradient, and the op that
/// produced it.
#[derive(Debug)]
pub struct DiffTensor<E> {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<E>,
    pub(crate) grad: Option<Vec<E>>,
    pub(crate) op: Op<E>,
    pub(crate) needs_grad: bool,
    pub(crate) trainable: bool,
}

impl<E: Element> DiffTensor<E> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn grad(&self) -> Option<&[E]> {
        self.grad.as_deref()
    }
}

/// Append-only computation graph.
pub struct Tape<E: Element> {
    nodes: Vec<DiffTensor<E>>,
    bytes: usize,
    backward_visits: usize,
    backward_fault: bool,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), bytes: 0, backward_visits: 0, backward_fault: false }
    }

    /// Insert a leaf. Trainable leaves receive gradients in `backward`;
    /// non-trainable leaves (frozen weights, constants) never do.
    pub fn leaf(
        &mut self,
        shape: &[usize],
        data: Vec<E>,
        trainable: bool,
    ) -> Result<NodeId, TensorError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::dim(
                "leaf",
                format!("shape {:?} holds {} elements, got {}", shape, shape.iter().product::<usize>(), data.len()),
            ));
        }
        if shape.contains(&0) {
            return Err(TensorError::dim("leaf", format!("zero-sized dimension in {shape:?}")));
        }
        self.push(shape.to_vec(), data, Op::Leaf, trainable, trainable)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, shape: &[usize], data: Vec<E>) -> Result<NodeId, TensorError> {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&mut self, v: E) -> NodeId {
        self.constant(&[], vec![v]).expect("scalar leaf")
    }

    pub fn value(&self, id: NodeId) -> &[E] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[E]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn node(&self, id: NodeId) -> &DiffTensor<E> {
        &self.nodes[id.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by value and gradient buffers, for the analytic peak
    /// memory estimate.
    pub fn allocated_bytes(&self) -> usize {
        self.bytes
    }

    /// How many nodes the last `backward` call visited.
    pub fn last_backward_visits(&self) -> usize {
        self.backward_visits
    }

    /// Corrupt one backward rule (relu passes gradients through negative
    /// inputs). Exists so the gradient checker's negative control can prove
    /// it detects broken rules.
    pub fn enable_backward_fault(&mut self) {
        self.backward_fault = true;
    }

    pub(crate) fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    pub(crate) fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<E>,
        op: Op<E>,
        needs_grad: bool,
        trainable: bool,
    ) -> Result<NodeId, TensorError> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        self.bytes += data.len() * E::bytes();
        self.nodes.push(DiffTensor { shape, data, grad: None, op, needs_grad, trainable });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar loss. Visits every node exactly once in
    /// reverse append order; afterwards every trainable leaf has a populated
    /// gradient (zero if disconnected from the loss).
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.data.len() != 1 {
            return Err(TensorError::NonScalarLoss { shape: loss_node.shape.clone() });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if self.nodes[loss.0].needs_grad {
            self.alloc_grad(loss.0);
            self.nodes[loss.0].grad.as_mut().unwrap()[0] = E::one();
        }

        self.backward_visits = 0;
        let fault = self.backward_fault;
        for i in (0..self.nodes.len()).rev() {
            self.backward_visits += 1;
            if self.nodes[i].grad.is_none() {
                continue;
            }
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &tail[0];
            let g = node.grad.as_ref().unwrap().clone();
            backprop(head, node, &g, fault, &mut self.bytes);
        }

        for i in 0..self.nodes.len() {
            if self.nodes[i].trainable && self.nodes[i].grad.is_none() {
                self.alloc_grad(i);
            }
        }
        Ok(())
    }

    fn alloc_grad(&mut self, i: usize) {
        let n = self.nodes[i].data.len();
        self.bytes += n * E::bytes();
        self.nodes[i].grad = Some(vec![E::zero(); n]);
    }
}

/// Add `contrib` into the gradient buffer of `id`, allocating lazily.
/// No-op when the target does not participate in differentiation.
pub(crate) fn accumulate<E: Element>(
    head: &mut [DiffTensor<E>],
    id: NodeId,
    contrib: &[E],
    bytes: &mut usize,
) {
    let node = &mut head[id.0];
    if !node.needs_grad {
        return;
    }
    let grad = node.grad.get_or_insert_with(|| {
        *bytes += contrib.len() * E::bytes();
        vec![E::zero(); contrib.len()]
    });
    debug_assert_eq!(grad.len(), contrib.len());
    for (g, c) in grad.iter_mut().zip(contrib) {
        *g += *c;
    }
}

fn backprop<E: Element>(
    head: &mut [DiffTensor<E>],
    node: &DiffTensor<E>,
    g: &[E],
    fault: bool,
    bytes: &mut usize,
) {
    match &node.op {
        Op::Leaf => {}
        Op::Add { a, b } => elementwise::backward_add(head, node, g, *a, *b, bytes),
        Op::Mul { a, b } => elementwise::backward_mul(head, node, g, *a, *b, bytes),
        Op::Scale { x, factor } => elementwise::backward_scale(head, g, *x, *factor, bytes),
        Op::Relu { x } => elementwise::backward_relu(head, g, *x, fault, bytes),
        Op::Sigmoid { x } => elementwise::backward_sigmoid(head, node, g, *x, bytes),
        Op::MatMul { a, b } => linalg::backward_matmul(head, node, g, *a, *b, bytes),
        Op::TemporalConv1d { x, w, bias } => {
            conv::backward_temporal_conv1d(head, g, *x, *w, *bias, bytes)
        }
        Op::Conv2d { x, w, bias, stride, pad } => {
            conv::backward_conv2d(head, node, g, *x, *w, *bias, *stride, *pad, bytes)
        }
        Op::BatchNormTrain { x, gamma, beta, mean, inv_std } => {
            norm::backward_batch_norm_train(head, g, *x, *gamma, *beta, mean, inv_std, bytes)
        }
        Op::BatchNormEval { x, gamma, beta, inv_std } => {
            norm::backward_batch_norm_eval(head, g, *x, *gamma, *beta, inv_std, bytes)
        }
        Op::LayerNorm { x, mean, inv_std } => {
            norm::backward_layer_norm(head, g, *x, mean, inv_std, bytes)
        }
        Op::Softmax { x } => norm::backward_softmax(head, node, g, *x, bytes),
        Op::CrossEntropy { logits, labels, probs } => {
            norm::backward_cross_entropy(head, g, *logits, labels, probs, bytes)
        }
        Op::PairwiseSqDist { q, p } => linalg::backward_pairwise_sqdist(head, g, *q, *p, bytes),
        Op::ReduceMean { x, axes } => shape_ops::backward_reduce_mean(head, g, *x, axes, bytes),
        Op::Permute { x, axes } => shape_ops::backward_permute(head, node, g, *x, axes, bytes),
        Op::Reshape { x } => accumulate(head, *x, g, bytes),
        Op::IndexSelect { x, axis, indices } => {
            shape_ops::backward_index_select(head, g, *x, *axis, indices, bytes)
        }
        Op::Concat { inputs, axis } => shape_ops::backward_concat(head, g, inputs, *axis, bytes),
    }
}
