//! Named parameter collections.

use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One named entry: a tensor plus whether the optimizer may update it.
/// Non-trainable entries hold state like batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered map of named tensors for a whole model (encoders, projection
/// heads, decoder). Iteration order is the sorted name order, which makes
/// serialization deterministic.
#[derive(Debug, Clone, Default)]
pub struct ModelParams {
    entries: BTreeMap<String, ParamEntry>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor, trainable: bool) {
        tensor.requires_grad = trainable;
        tensor.node_id = None;
        self.entries.insert(name.into(), ParamEntry { tensor, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Total number of trainable scalar values.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            entry.tensor.zero_grad();
            entry.tensor.node_id = None;
        }
    }
}
