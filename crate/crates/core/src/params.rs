//! Named parameter storage shared by every model component.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of an entry in a [`ParamStore`].
pub type ParamId = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// `false` for buffers such as batch-norm running statistics.
    pub trainable: bool,
}

/// Ordered collection of named tensors. Insertion order is stable and is the
/// order used for digests and checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, trainable: bool) -> ParamId {
        if let Some(&id) = self.index.get(name) {
            self.entries[id] = ParamEntry { name: name.to_string(), value, trainable };
            return id;
        }
        let id = self.entries.len();
        self.entries.push(ParamEntry { name: name.to_string(), value, trainable });
        self.index.insert(name.to_string(), id);
        id
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id].value
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Ids of all entries whose name starts with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        (0..self.entries.len()).filter(|&i| self.entries[i].name.starts_with(prefix)).collect()
    }

    /// Number of trainable scalars under `prefix`.
    pub fn count_trainable(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    /// Replace the value of an existing entry, checking its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Checkpoint(alloc::format!("unknown parameter '{name}'")))?;
        if self.entries[id].value.shape() != value.shape() {
            return Err(Error::Checkpoint(alloc::format!(
                "parameter '{}' has shape {:?}, loaded {:?}",
                name,
                self.entries[id].value.shape(),
                value.shape()
            )));
        }
        self.entries[id].value = value;
        Ok(())
    }

    /// Copy every entry under `prefix` from `other` (same names required).
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for e in other.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            self.set(&e.name, e.value.clone())?;
            copied += 1;
        }
        if copied == 0 {
            return Err(Error::Checkpoint(alloc::format!("no parameters under '{prefix}'")));
        }
        Ok(copied)
    }

    /// SHA-256 over names, shapes and exact bit patterns of entries under
    /// `prefix`, as lowercase hex.
    pub fn digest(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            h.update(e.name.as_bytes());
            for &d in e.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        let out = h.finalize();
        let mut s = String::with_capacity(64);
        for b in out.iter() {
            s.push_str(&alloc::format!("{b:02x}"));
        }
        s
    }
}
