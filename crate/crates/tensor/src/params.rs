use std::collections::HashMap;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tape::Gradients;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Element> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Named trainable tensors, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T: Element = f64> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a parameter. Panics on a duplicate name since that is a
    /// model-construction bug.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            tensor: tensor.with_requires_grad(true),
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.grad = None;
        }
    }

    /// Adds the tape's parameter gradients into each tensor's `grad` buffer.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.param_grads() {
            let t = &mut self.params[id.0].tensor;
            match &mut t.grad {
                Some(acc) => {
                    for (a, &v) in acc.iter_mut().zip(g) {
                        *a += v;
                    }
                }
                None => t.grad = Some(g.to_vec()),
            }
        }
    }

    /// Gives every parameter without a gradient an explicit zero gradient.
    /// Parameters unreachable from a loss (e.g. a disabled head) use this.
    pub fn fill_missing_grads(&mut self) {
        for p in &mut self.params {
            if p.tensor.grad.is_none() {
                p.tensor.grad = Some(vec![T::zero(); p.tensor.numel()]);
            }
        }
    }

    /// L2 norm of all accumulated gradients taken together.
    pub fn grad_norm(&self) -> f64 {
        let sq: f64 = self
            .params
            .iter()
            .filter_map(|p| p.tensor.grad.as_deref())
            .flat_map(|g| g.iter())
            .map(|&v| v.as_f64() * v.as_f64())
            .sum();
        sq.sqrt()
    }

    /// Rescales every gradient so that their joint L2 norm is at most
    /// `max_norm`. Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let scale = T::lit(max_norm / norm);
            for g in self.params.iter_mut().filter_map(|p| p.tensor.grad.as_mut()) {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
        }
        norm
    }

    pub fn grad(&self, id: ParamId) -> Result<&[T]> {
        self.params[id.0]
            .tensor
            .grad
            .as_deref()
            .ok_or_else(|| TensorError::MissingGrad(self.params[id.0].name.clone()))
    }
}
