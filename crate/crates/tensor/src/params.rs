use indexmap::IndexMap;

use crate::error::{Result, TensorError};
use crate::graph::{Gradients, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named, ordered collection of model tensors.
///
/// Trainable tensors carry `requires_grad = true`; buffers such as batch-norm running
/// statistics are stored alongside with `requires_grad = false`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn new() -> Self {
        Self {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), tensor);
    }

    /// Inserts a trainable tensor.
    pub fn insert_param(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.insert(name, tensor.with_requires_grad(true));
    }

    /// Inserts a non-trainable buffer.
    pub fn insert_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.insert(name, tensor.with_requires_grad(false));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| TensorError::Contract(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| TensorError::Contract(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.tensors
            .values()
            .filter(|t| t.requires_grad())
            .map(Tensor::numel)
            .sum()
    }

    /// Registers every tensor as a leaf of `graph`.
    pub fn bind(&self, graph: &Graph<T>) -> Result<BoundParams> {
        let mut vars = IndexMap::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            vars.insert(name.clone(), graph.param(t)?);
        }
        Ok(BoundParams { vars })
    }

    /// Adds the gradients of bound trainable tensors into their gradient slots.
    pub fn accumulate_grads(&mut self, bound: &BoundParams, grads: &Gradients<T>) -> Result<()> {
        for (name, t) in self.tensors.iter_mut() {
            if !t.requires_grad() {
                continue;
            }
            let Some(&var) = bound.vars.get(name) else {
                continue;
            };
            if let Some(g) = grads.get(var) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// True when every tensor's values match `other` bit for bit.
    pub fn bit_identical(&self, other: &ModelParams<T>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}

/// Graph handles for a bound [`ModelParams`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::Contract(format!("parameter {name} not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
