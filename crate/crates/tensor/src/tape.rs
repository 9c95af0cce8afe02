//! Eager reverse-mode autodiff.
//!
//! Every differentiable call on a [`Tape`] computes its value immediately and
//! appends a node describing how it was produced. [`Tape::backward`] walks the
//! node list once in reverse, so nodes are always topologically ordered by
//! construction.

use std::collections::HashMap;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// A differentiable operation defined outside this crate.
pub trait CustomOp<T: Element>: Send {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian product. Returns one entry per input, `None` for
    /// inputs that receive no gradient.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &[T],
    ) -> Vec<Option<Vec<T>>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) enum Op<T: Element> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<T> },
    UpsampleNearest { x: Var, factor: usize },
    UpsampleBilinear { x: Var, factor: usize },
    AvgPool { x: Var, k: usize },
    GlobalMaxPool { x: Var, argmax: Vec<usize> },
    ScaleRows { x: Var, s: Var },
    Cosine { a: Var, b: Var },
    NormalizeRows { x: Var, eps: T },
    WeightedMse { a: Var, b: Var, weights: Vec<T>, denom: T },
    Bce { p: Var, target: Vec<T>, eps: T },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

impl<T: Element> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::NormalizeRows { x, .. } => vec![*x],
            Op::Softmax { x, .. }
            | Op::Slice { x, .. }
            | Op::UpsampleNearest { x, .. }
            | Op::UpsampleBilinear { x, .. }
            | Op::AvgPool { x, .. }
            | Op::GlobalMaxPool { x, .. } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Linear { x, w, b } | Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::ScaleRows { x, s } => vec![*x, *s],
            Op::Cosine { a, b } | Op::WeightedMse { a, b, .. } => vec![*a, *b],
            Op::Bce { p, .. } => vec![*p],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

pub(crate) struct Node<T: Element> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub needs_grad: bool,
}

/// Records one forward pass. Confined to a single thread for its lifetime.
pub struct Tape<T: Element = f64> {
    pub(crate) nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    finished: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            finished: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node so the tape can record a new pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.finished = false;
    }

    /// Input value; differentiable when `tensor.requires_grad` is set.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        let needs = tensor.requires_grad;
        tensor.grad = None;
        self.push_raw(tensor, Op::Leaf, needs)
    }

    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        tensor.grad = None;
        self.push_raw(tensor, Op::Leaf, false)
    }

    /// Records (once per tape) the current value of a stored parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let src = store.get(id);
        let value = Tensor::new(src.shape().to_vec(), src.data().to_vec())
            .expect("stored parameter is well formed");
        let v = self.push_raw(value, Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a node computed outside this crate.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_raw(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            needs,
        )
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_raw(value, op, needs)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a scalar loss. Fails if called twice without
    /// [`Tape::reset`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.finished {
            return Err(TensorError::BackwardTwice);
        }
        let shape = self.nodes[loss.0].value.shape();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        self.finished = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let is_leaf = matches!(node.op, Op::Leaf | Op::Param);
            if is_leaf {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            for (input, contrib) in self.vjp(i, &g) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a += *c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn vjp(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => vec![],
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let gs = op.backward(&vals, out, g);
                assert_eq!(gs.len(), inputs.len(), "custom op `{}` arity", op.name());
                inputs
                    .iter()
                    .zip(gs)
                    .filter_map(|(v, g)| {
                        g.map(|g| {
                            assert_eq!(g.len(), self.value(*v).numel(), "custom op `{}`", op.name());
                            (*v, g)
                        })
                    })
                    .collect()
            }
            Op::Conv2d { .. }
            | Op::UpsampleNearest { .. }
            | Op::UpsampleBilinear { .. }
            | Op::AvgPool { .. }
            | Op::GlobalMaxPool { .. } => crate::conv::vjp(self, &node.op, g),
            _ => crate::ops::vjp(self, &node.op, out, g),
        }
    }
}

/// Gradients of the loss with respect to every differentiable leaf.
pub struct Gradients<T: Element> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of the parameters that were read on the tape, in
    /// parameter-id order.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[T])> + '_ {
        let mut ps = self.params.clone();
        ps.sort();
        ps.into_iter()
            .filter_map(move |(id, v)| self.get(v).map(|g| (id, g)))
    }
}

/// Test hooks that deliberately break a backward rule, so the gradient
/// checker can be shown to catch it.
#[doc(hidden)]
pub mod fault {
    use std::cell::Cell;

    thread_local! {
        static CORRUPT_CONV: Cell<bool> = const { Cell::new(false) };
    }

    pub fn corrupt_conv_backward(on: bool) {
        CORRUPT_CONV.with(|c| c.set(on));
    }

    pub(crate) fn conv_corrupted() -> bool {
        CORRUPT_CONV.with(|c| c.get())
    }
}
