use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{ConvGeom, PoolGeom};
use crate::real::Real;
use crate::tensor::{broadcast_strides, for_each_broadcast, Tensor};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    pub(crate) tape: u32,
    pub(crate) index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Exp,
    Ln,
    Relu,
    Sigmoid,
    Abs,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// Recorded operation plus whatever the backward rule needs beyond the
/// input and output values.
#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Unary(UnaryKind),
    Binary(BinaryKind),
    Scale(T),
    Offset,
    Clamp { lo: T, hi: T },
    MatMul,
    Reduce {
        kind: ReduceKind,
        keep_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    Reshape,
    Conv { geom: ConvGeom, bias: bool },
    ConvTranspose { geom: ConvGeom, bias: bool },
    AvgPool(PoolGeom),
    Resize,
    SpatialSoftmax,
    ConcatChannels,
    BatchNorm { x_hat: Tensor<T>, inv_std: Vec<T> },
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Unary(UnaryKind::Exp) => "exp",
            Op::Unary(UnaryKind::Ln) => "ln",
            Op::Unary(UnaryKind::Relu) => "relu",
            Op::Unary(UnaryKind::Sigmoid) => "sigmoid",
            Op::Unary(UnaryKind::Abs) => "abs",
            Op::Unary(UnaryKind::Neg) => "neg",
            Op::Binary(BinaryKind::Add) => "add",
            Op::Binary(BinaryKind::Sub) => "sub",
            Op::Binary(BinaryKind::Mul) => "mul",
            Op::Binary(BinaryKind::Max) => "max",
            Op::Scale(_) => "scale",
            Op::Offset => "offset",
            Op::Clamp { .. } => "clamp",
            Op::MatMul => "matmul",
            Op::Reduce { .. } => "reduce",
            Op::Reshape => "reshape",
            Op::Conv { .. } => "conv2d",
            Op::ConvTranspose { .. } => "conv_transpose2d",
            Op::AvgPool(_) => "avg_pool2d",
            Op::Resize => "bilinear_resize",
            Op::SpatialSoftmax => "spatial_softmax",
            Op::ConcatChannels => "concat",
            Op::BatchNorm { .. } => "batch_norm",
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node<T> {
    pub(crate) op: Op<T>,
    pub(crate) inputs: Vec<usize>,
    pub(crate) value: Tensor<T>,
    pub(crate) requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Node `i` only ever refers to inputs with index `< i`, so reverse insertion
/// order is a valid topological order for the backward pass.
#[derive(Debug)]
pub struct Tape<T> {
    id: u32,
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf whose gradient is wanted.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Records a leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad,
        });
        self.var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.check(v).expect("variable from another tape")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Ids of all nodes in recording order, paired with their op names.
    pub fn trace(&self) -> Vec<(&'static str, Vec<usize>)> {
        self.nodes
            .iter()
            .map(|n| (n.op.name(), n.inputs.clone()))
            .collect()
    }

    /// Hash of every branch taken by a non-smooth op (ReLU and abs signs,
    /// max and clamp sides, reduce-max winners). Two evaluations with equal
    /// signatures lie in the same smooth piece, barring hash collisions.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (id, n) in self.nodes.iter().enumerate() {
            let input = |k: usize| self.nodes[n.inputs[k]].value.data();
            let bits: Vec<u8> = match &n.op {
                Op::Unary(UnaryKind::Relu) => input(0).iter().map(|&v| (v > T::zero()) as u8).collect(),
                Op::Unary(UnaryKind::Abs) => input(0).iter().map(|&v| (v >= T::zero()) as u8).collect(),
                Op::Binary(BinaryKind::Max) => {
                    let (a, b) = (&self.nodes[n.inputs[0]].value, &self.nodes[n.inputs[1]].value);
                    let out = n.value.shape();
                    let (sa, sb) = (broadcast_strides(a.shape(), out), broadcast_strides(b.shape(), out));
                    let mut bits = vec![0u8; n.value.len()];
                    for_each_broadcast(out, &sa, &sb, |o, ia, ib| bits[o] = (a.data()[ia] >= b.data()[ib]) as u8);
                    bits
                }
                Op::Clamp { lo, hi } => input(0)
                    .iter()
                    .map(|&v| if v < *lo { 0 } else if v > *hi { 2 } else { 1 })
                    .collect(),
                Op::Reduce { argmax, .. } => {
                    argmax.hash(&mut h);
                    continue;
                }
                _ => continue,
            };
            id.hash(&mut h);
            bits.hash(&mut h);
        }
        h.finish()
    }

    fn var(&self, index: usize) -> Var {
        Var {
            tape: self.id,
            index,
        }
    }

    pub(crate) fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Grad(format!(
                "variable {} does not belong to this tape",
                v.index
            )));
        }
        Ok(v.index)
    }

    pub(crate) fn push(&mut self, op: Op<T>, inputs: &[Var], value: Tensor<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let mut idx = Vec::with_capacity(inputs.len());
        for &v in inputs {
            idx.push(self.check(v)?);
        }
        let requires_grad = idx.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            inputs: idx,
            value,
            requires_grad,
        });
        Ok(self.var(self.nodes.len() - 1))
    }
}

/// Result of a backward pass: one gradient per tape node that needed one.
#[derive(Debug)]
pub struct Gradients<T> {
    tape: u32,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub(crate) fn new(tape: u32, grads: Vec<Option<Tensor<T>>>) -> Self {
        Gradients { tape, grads }
    }

    /// Gradient for `v`, if it was part of the differentiated graph.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`; panics when `v` did not require gradients.
    pub fn wrt(&self, v: Var) -> &Tensor<T> {
        self.get(v).expect("no gradient recorded for variable")
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(|g| g.take())
    }
}

impl<T: Real> Tape<T> {
    pub(crate) fn id(&self) -> u32 {
        self.id
    }
}
