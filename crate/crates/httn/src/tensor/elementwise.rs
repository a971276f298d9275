//! Elementwise ops: broadcast add/mul, scalar scale, relu, sigmoid.

use super::{
    accumulate, broadcast_shape, broadcast_strides, zip_broadcast, DiffTensor, Element, NodeId,
    Op, Tape, TensorError,
};

impl<E: Element> Tape<E> {
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_broadcast(a, b, "add", |x, y| x + y, |ai, bi| Op::Add { a: ai, b: bi })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_broadcast(a, b, "mul", |x, y| x * y, |ai, bi| Op::Mul { a: ai, b: bi })
    }

    pub fn scale(&mut self, x: NodeId, factor: E) -> Result<NodeId, TensorError> {
        let xn = self.node(x);
        let data: Vec<E> = xn.data.iter().map(|&v| v * factor).collect();
        let shape = xn.shape.clone();
        let needs = self.needs(&[x]);
        self.push(shape, data, Op::Scale { x, factor }, needs, false)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xn = self.node(x);
        let data: Vec<E> = xn.data.iter().map(|&v| if v > E::zero() { v } else { E::zero() }).collect();
        let shape = xn.shape.clone();
        let needs = self.needs(&[x]);
        self.push(shape, data, Op::Relu { x }, needs, false)
    }

    /// Numerically guarded logistic: never exponentiates a positive argument.
    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xn = self.node(x);
        let data: Vec<E> = xn.data.iter().map(|&v| stable_sigmoid(v)).collect();
        let shape = xn.shape.clone();
        let needs = self.needs(&[x]);
        self.push(shape, data, Op::Sigmoid { x }, needs, false)
    }

    fn binary_broadcast(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(E, E) -> E,
        mk: impl Fn(NodeId, NodeId) -> Op<E>,
    ) -> Result<NodeId, TensorError> {
        let (an, bn) = (self.node(a), self.node(b));
        let out_shape = broadcast_shape(&an.shape, &bn.shape).ok_or_else(|| {
            TensorError::dim(name, format!("shapes {:?} and {:?} do not broadcast", an.shape, bn.shape))
        })?;
        let sa = broadcast_strides(&an.shape, out_shape.len());
        let sb = broadcast_strides(&bn.shape, out_shape.len());
        let mut data = vec![E::zero(); out_shape.iter().product()];
        zip_broadcast(&out_shape, &sa, &sb, |flat, oa, ob| {
            data[flat] = f(an.data[oa], bn.data[ob]);
        });
        let needs = self.needs(&[a, b]);
        self.push(out_shape, data, mk(a, b), needs, false)
    }
}

pub(crate) fn stable_sigmoid<E: Element>(v: E) -> E {
    if v >= E::zero() {
        E::one() / (E::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (E::one() + e)
    }
}

/// Sum a broadcast-shaped gradient back down to the operand's own shape.
fn reduce_to_operand<E: Element>(
    g: &[E],
    out_shape: &[usize],
    operand_shape: &[usize],
) -> Vec<E> {
    let strides = broadcast_strides(operand_shape, out_shape.len());
    let zero_strides = vec![0usize; out_shape.len()];
    let mut reduced = vec![E::zero(); operand_shape.iter().product()];
    zip_broadcast(out_shape, &strides, &zero_strides, |flat, off, _| {
        reduced[off] += g[flat];
    });
    reduced
}

pub(super) fn backward_add<E: Element>(
    head: &mut [DiffTensor<E>],
    node: &DiffTensor<E>,
    g: &[E],
    a: NodeId,
    b: NodeId,
    bytes: &mut usize,
) {
    if head[a.0].needs_grad {
        let da = reduce_to_operand(g, &node.shape, &head[a.0].shape);
        accumulate(head, a, &da, bytes);
    }
    if head[b.0].needs_grad {
        let db = reduce_to_operand(g, &node.shape, &head[b.0].shape);
        accumulate(head, b, &db, bytes);
    }
}

pub(super) fn backward_mul<E: Element>(
    head: &mut [DiffTensor<E>],
    node: &DiffTensor<E>,
    g: &[E],
    a: NodeId,
    b: NodeId,
    bytes: &mut usize,
) {
    let out_shape = &node.shape;
    let sa = broadcast_strides(&head[a.0].shape, out_shape.len());
    let sb = broadcast_strides(&head[b.0].shape, out_shape.len());
    if head[a.0].needs_grad {
        let mut tmp = vec![E::zero(); g.len()];
        zip_broadcast(out_shape, &sa, &sb, |flat, _, ob| {
            tmp[flat] = g[flat] * head[b.0].data[ob];
        });
        let da = reduce_to_operand(&tmp, out_shape, &head[a.0].shape);
        accumulate(head, a, &da, bytes);
    }
    if head[b.0].needs_grad {
        let mut tmp = vec![E::zero(); g.len()];
        zip_broadcast(out_shape, &sa, &sb, |flat, oa, _| {
            tmp[flat] = g[flat] * head[a.0].data[oa];
        });
        let db = reduce_to_operand(&tmp, out_shape, &head[b.0].shape);
        accumulate(head, b, &db, bytes);
    }
}

pub(super) fn backward_scale<E: Element>(
    head: &mut [DiffTensor<E>],
    g: &[E],
    x: NodeId,
    factor: E,
    bytes: &mut usize,
) {
    if head[x.0].needs_grad {
        let dx: Vec<E> = g.iter().map(|&v| v * factor).collect();
        accumulate(head, x, &dx, bytes);
    }
}

pub(super) fn backward_relu<E: Element>(
    head: &mut [DiffTensor<E>],
    g: &[E],
    x: NodeId,
    fault: bool,
    bytes: &mut usize,
) {
    if head[x.0].needs_grad {
        let dx: Vec<E> = head[x.0]
            .data
            .iter()
            .zip(g)
            .map(|(&v, &gi)| if fault || v > E::zero() { gi } else { E::zero() })
            .collect();
        accumulate(head, x, &dx, bytes);
    }
}

pub(super) fn backward_sigmoid<E: Element>(
    head: &mut [DiffTensor<E>],
    node: &DiffTensor<E>,
    g: &[E],
    x: NodeId,
    bytes: &mut usize,
) {
    if head[x.0].needs_grad {
        let dx: Vec<E> = node
            .data
            .iter()
            .zip(g)
            .map(|(&y, &gi)| gi * y * (E::one() - y))
            .collect();
        accumulate(head, x, &dx, bytes);
    }
}
