use alloc::string::String;
use alloc::vec::Vec;

use super::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    /// Trainable parameter.
    Param,
    /// Persistent state that is not trained (batch-norm running statistics).
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: EntryKind,
}

/// Named tensors of a network, in registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, name: String, value: Tensor<T>, kind: EntryKind) -> usize {
        self.entries.push(Entry { name, value, kind });
        self.entries.len() - 1
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn get(&self, id: usize) -> &Tensor<T> {
        &self.entries[id].value
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.entries[id].value
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == EntryKind::Param)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads {
            tensors: self
                .entries
                .iter()
                .map(|e| match e.kind {
                    EntryKind::Param => Tensor::zeros(e.value.shape()),
                    EntryKind::Buffer => Tensor::zeros(&[0]),
                })
                .collect(),
        }
    }
}

/// Gradient accumulators, indexed like the owning [`ParamStore`].
/// Buffers get empty tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> Grads<T> {
    pub fn clear(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.fill(T::zero()));
    }

    #[inline]
    pub(crate) fn slot(&mut self, id: usize) -> &mut [T] {
        self.tensors[id].data_mut()
    }
}
