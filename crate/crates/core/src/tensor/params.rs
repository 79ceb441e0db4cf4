use std::collections::BTreeMap;
use std::ops::Index;

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{NeurankError, Result};

/// Named tensors, ordered by name so that iteration (and therefore
/// serialization and optimizer updates) is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

/// Parameter name → tape handle for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<Var> {
        self.get(name)
            .ok_or_else(|| NeurankError::Contract(format!("parameter `{name}` is not bound")))
    }
}

impl Index<&str> for Bindings {
    type Output = Var;

    fn index(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| NeurankError::Contract(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Moves every entry of `other` into `self`, replacing same-named entries.
    pub fn extend(&mut self, other: ParamSet) {
        self.tensors.extend(other.tensors);
    }

    /// Entries whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.tensors.values_mut().for_each(|t| t.set_requires_grad(flag));
    }

    /// Registers every tensor as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        Bindings {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.leaf(t.clone())))
                .collect(),
        }
    }

    /// Adds the adjoints of bound leaves into each tensor's `grad` buffer.
    pub fn accumulate_grads(&mut self, bindings: &Bindings, grads: &Gradients) -> Result<()> {
        for (name, t) in self.tensors.iter_mut() {
            if !t.requires_grad() {
                continue;
            }
            let Some(var) = bindings.get(name) else { continue };
            let g = grads.get(var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
            let merged = match t.grad() {
                Some(prev) => prev.iter().zip(&g).map(|(a, b)| a + b).collect(),
                None => g,
            };
            t.set_grad(merged)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}
