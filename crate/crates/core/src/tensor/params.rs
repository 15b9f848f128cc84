use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Named trainable tensors with a gradient slot of identical shape each.
///
/// Iteration order is the lexical order of names, which fixes the layout of
/// checkpoints and the order of optimizer updates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.grads.insert(name.clone(), Tensor::zeros(value.shape()));
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.grads
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing gradient for {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor, scale: f64) -> Result<()> {
        let slot = self
            .grads
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        if slot.shape() != grad.shape() {
            return Err(Error::dim("accumulate_grad", name.to_string(), slot.len(), grad.len()));
        }
        slot.add_scaled(grad, scale);
        Ok(())
    }

    /// Scale every gradient, e.g. to turn a batch sum into a batch mean.
    pub fn scale_grads(&mut self, scale: f64) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }

    /// Add gradients from another store with the same parameter names.
    pub fn merge_grads(&mut self, other: &ParamStore) -> Result<()> {
        for (name, g) in &other.grads {
            self.accumulate_grad(name, g, 1.0)?;
        }
        Ok(())
    }

    /// A store holding only parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, v) in self.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            out.params.insert(k.clone(), v.clone());
            out.grads.insert(k.clone(), Tensor::zeros(v.shape()));
        }
        out
    }

    /// Copy values of every parameter in `other` into this store.
    pub fn overwrite_from(&mut self, other: &ParamStore) -> Result<()> {
        for (k, v) in other.iter() {
            let slot = self.get_mut(k)?;
            if slot.shape() != v.shape() {
                return Err(Error::dim("overwrite_from", k.to_string(), slot.len(), v.len()));
            }
            *slot = v.clone();
        }
        Ok(())
    }

    pub(crate) fn grads_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor, &Tensor)> {
        let grads = &self.grads;
        self.params
            .iter_mut()
            .map(move |(k, v)| (k, v, grads.get(k).expect("gradient slot exists for every parameter")))
    }

    pub(crate) fn has_grad(&self, name: &str) -> bool {
        self.grads.contains_key(name)
    }
}
