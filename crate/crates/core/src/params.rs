//! Named collections of trainable matrices.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

/// Every trainable tensor of a model, keyed by `<block>.<role>` names.
///
/// Gradients use the same type, so a gradient set always mirrors the
/// parameter set it was computed for.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.rows(), t.cols())))
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &ParameterSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, ta), (kb, tb))| ka == kb && ta.shape() == tb.shape())
    }

    /// Registers every tensor as a named parameter on `graph`.
    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), graph.param(k.clone(), t.clone())))
                .collect(),
        }
    }

    /// Registers every tensor as a constant (no gradients flow).
    pub fn bind_frozen(&self, graph: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), graph.constant(t.clone())))
                .collect(),
        }
    }
}

impl From<BTreeMap<String, Tensor>> for ParameterSet {
    fn from(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }
}

/// Graph handles for a bound [`ParameterSet`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Panics when `name` was never bound; names come from the encoder layout.
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }
}
