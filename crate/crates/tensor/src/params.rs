use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub tensor: Tensor,
    /// Who owns the entry: a node type, an edge type, or `"shared"`.
    pub owner: String,
    /// Non-trainable entries (running statistics, optimizer moments) are
    /// stored and checkpointed but never bound with gradients.
    pub trainable: bool,
}

/// Named parameter collection. Iteration order is lexicographic by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a new entry; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, owner: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(TensorError::Config(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, ParamEntry { tensor, owner: owner.into(), trainable });
        Ok(())
    }

    /// Insert or overwrite.
    pub fn set(&mut self, name: impl Into<String>, owner: impl Into<String>, tensor: Tensor, trainable: bool) {
        self.entries.insert(name.into(), ParamEntry { tensor, owner: owner.into(), trainable });
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    /// Replace the values of an existing entry, keeping its shape.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let t = self.tensor_mut(name)?;
        if t.shape() != value.shape() {
            return Err(TensorError::Shape(format!(
                "cannot assign {:?} to `{name}` of shape {:?}",
                value.shape(),
                t.shape()
            )));
        }
        *t = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<ParamEntry> {
        self.entries.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across trainable entries.
    pub fn trainable_size(&self) -> usize {
        self.entries.values().filter(|e| e.trainable).map(|e| e.tensor.len()).sum()
    }

    /// Bitwise equality of all entries (names, owners, flags, values).
    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, a), (kb, b))| {
                ka == kb && a.owner == b.owner && a.trainable == b.trainable && a.tensor.bitwise_eq(&b.tensor)
            })
    }
}
