//! Named parameter and buffer storage shared by all layers of a model.

use std::collections::BTreeMap;

use dermres_core::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

/// Which part of the model an entry belongs to for training purposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Frozen,
    BackboneTrainable,
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Entry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Accumulated gradient; `None` for buffers and until first backward.
    pub grad: Option<Tensor<T>>,
    /// Running statistics and similar state that is not optimised.
    pub is_buffer: bool,
    pub partition: Partition,
}

impl<T: Scalar> Entry<T> {
    pub fn trainable(&self) -> bool {
        !self.is_buffer && self.partition != Partition::Frozen
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: BTreeMap::new() }
    }

    fn push(&mut self, name: String, value: Tensor<T>, is_buffer: bool) -> ParamId {
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Entry { name, value, grad: None, is_buffer, partition: Partition::BackboneTrainable });
        ParamId(id)
    }

    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, false)
    }

    pub fn buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Entry<T>] {
        &mut self.entries
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn entry(&self, id: ParamId) -> &Entry<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    /// Gradient slot for `id`, zero-initialised on first use.
    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        let e = &mut self.entries[id.0];
        debug_assert!(!e.is_buffer, "buffer {} has no gradient", e.name);
        e.grad.get_or_insert_with(|| Tensor::zeros(e.value.shape()))
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// Assign a partition to every entry whose name starts with `prefix`.
    pub fn set_partition_prefix(&mut self, prefix: &str, partition: Partition) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.partition = partition;
            }
        }
    }

    pub fn set_partition(&mut self, id: ParamId, partition: Partition) {
        self.entries[id.0].partition = partition;
    }

    /// Number of scalar values in parameters (buffers excluded).
    pub fn parameter_count(&self) -> usize {
        self.entries.iter().filter(|e| !e.is_buffer).map(|e| e.value.len()).sum()
    }
}

impl<T: Scalar> ParamStore<T> {
    /// Value and (zero-initialised) gradient of one parameter at once.
    pub fn value_and_grad(&mut self, id: ParamId) -> (&Tensor<T>, &mut Tensor<T>) {
        let e = &mut self.entries[id.0];
        let shape = e.value.shape().to_vec();
        (&e.value, e.grad.get_or_insert_with(|| Tensor::zeros(&shape)))
    }
}
