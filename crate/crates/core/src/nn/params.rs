use crate::autodiff::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable weight.
    Weight,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub kind: ParamKind,
}

/// Ordered, named collection of every array a model owns.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T> {
    entries: Vec<ParamEntry<T>>,
}

/// `true` when `name` is `prefix` itself or lies under it (`prefix.…`).
pub fn under_prefix(name: &str, prefix: &str) -> bool {
    name == prefix
        || (name.len() > prefix.len()
            && name.starts_with(prefix)
            && name.as_bytes()[prefix.len()] == b'.')
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub(crate) fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, kind: ParamKind) -> ParamId {
        let name = name.into();
        debug_assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, tensor, kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Number of trainable scalars.
    pub fn num_weights(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Weight)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Ids of every entry under any of the given module prefixes.
    pub fn ids_under(&self, prefixes: &[String]) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, e)| prefixes.iter().any(|p| under_prefix(&e.name, p)))
            .map(|(id, _)| id)
            .collect()
    }

    /// Copies out every array (snapshot for early stopping / rollback).
    pub fn snapshot(&self) -> Vec<Vec<T>> {
        self.entries.iter().map(|e| e.tensor.data().to_vec()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<T>]) {
        for (e, data) in self.entries.iter_mut().zip(snapshot) {
            e.tensor.data_mut().copy_from_slice(data);
        }
    }
}
