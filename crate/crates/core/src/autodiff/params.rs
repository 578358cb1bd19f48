use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, trainable tensors owned by one model.
///
/// Each store carries a process-unique key so a [`Graph`] can bind
/// parameters from several stores (two views in one step) without
/// confusing them. A frozen store binds its tensors as constants.
#[derive(Debug)]
pub struct ParamStore {
    key: u64,
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
    frozen: bool,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            key: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.clone(),
            index: self.index.clone(),
            frozen: self.frozen,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            key: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
            frozen: false,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Records the parameter on `g` (once per graph) and returns its node.
    pub fn bind(&self, g: &mut Graph, id: ParamId) -> Var {
        let key = (self.key, id.0);
        if let Some(v) = g.cached_param(key) {
            return v;
        }
        g.insert_param(key, self.values[id.0].clone(), !self.frozen)
    }

    /// Makes `var` the node this parameter binds to on `g`, so gradients can
    /// be taken with respect to externally created inputs.
    pub fn bind_to(&self, g: &mut Graph, id: ParamId, var: Var) -> Result<()> {
        let want = self.values[id.0].shape();
        if g.value(var).shape() != want {
            return Err(Error::Dimension {
                op: "bind_to",
                lhs: g.value(var).shape().to_vec(),
                rhs: want.to_vec(),
            });
        }
        g.set_param((self.key, id.0), var);
        Ok(())
    }

    /// Gradients of every parameter after `g.backward`, zero for parameters
    /// the loss did not reach. Order matches [`ParamStore::ids`].
    pub fn gradients(&self, g: &Graph) -> Vec<Tensor> {
        (0..self.values.len())
            .map(|i| {
                g.cached_param((self.key, i))
                    .and_then(|v| g.grad(v))
                    .unwrap_or_else(|| Tensor::zeros(self.values[i].shape()))
            })
            .collect()
    }

    /// Bitwise fingerprint of all parameter values.
    pub fn checksum(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, t) in self.iter() {
            name.hash(&mut h);
            t.shape().hash(&mut h);
            for v in t.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}
