//! Named parameter collections: the unit the optimizer, checkpoints and
//! gradient queries all operate on.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Tape, Tensor, Var};

/// Ordered map from parameter name to tensor. BTreeMap keeps iteration
/// (and therefore serialization and update order) deterministic.
#[derive(Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct NamedTensors {
    tensors: BTreeMap<String, Tensor>,
}

impl NamedTensors {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
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

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Merges another set under a name prefix (e.g. head parameters).
    pub fn extend_prefixed(&mut self, prefix: &str, other: &NamedTensors) {
        for (name, t) in other.iter() {
            self.insert(format!("{prefix}{name}"), t.clone());
        }
    }

    /// Registers every tensor as a tracked leaf on `tape`.
    pub fn tracked(&self, tape: &Tape) -> NamedVars {
        NamedVars {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.leaf(t.clone())))
                .collect(),
        }
    }

    /// Wraps every tensor as an untracked constant (eval mode).
    pub fn constants(&self) -> NamedVars {
        NamedVars {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Var::constant(t.clone())))
                .collect(),
        }
    }
}

impl std::fmt::Debug for NamedTensors {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut map = f.debug_map();
        for (k, t) in &self.tensors {
            map.entry(k, &t.shape());
        }
        map.finish()
    }
}

/// The [`Var`] view of a [`NamedTensors`], bound to one tape (or to no tape
/// in eval mode).
pub struct NamedVars {
    vars: BTreeMap<String, Var>,
}

impl NamedVars {
    pub fn get(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Collects gradients back into a tensor map after `backward`.
    pub fn gradients(&self, grads: &super::Gradients) -> NamedTensors {
        let mut out = NamedTensors::new();
        for (name, var) in &self.vars {
            out.insert(name.clone(), grads.wrt(var));
        }
        out
    }
}
