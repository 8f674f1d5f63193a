use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use super::tensor::{shape_str, Tensor};
use crate::error::{Error, Result};

/// Named gradient tensors, keyed like the [`ParamSet`] they belong to.
pub type GradMap = IndexMap<String, Tensor>;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered collection of named tensors. Iteration follows insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: IndexMap<String, ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name '{name}'")));
        }
        self.entries.insert(name, ParamEntry { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::NotFound(format!("parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.tensor)
    }

    /// Replaces the value of an existing entry, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::NotFound(format!("parameter '{name}'")))?;
        if entry.tensor.shape() != tensor.shape() {
            return Err(Error::shape(
                "ParamSet::set",
                shape_str(entry.tensor.shape()),
                shape_str(tensor.shape()),
            ));
        }
        entry.tensor = tensor;
        Ok(())
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for e in self.entries.values_mut() {
            e.trainable = trainable;
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total number of scalar values across all entries.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }

    pub fn trainable_scalar_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    /// SHA-256 over names, shapes and the exact `f64` bytes of every entry.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, entry) in &self.entries {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
            for &d in entry.tensor.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in entry.tensor.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Appends all entries of `other`; names must not collide.
    pub fn extend(&mut self, other: &ParamSet) -> Result<()> {
        for (name, entry) in other.iter() {
            self.insert(name, entry.tensor.clone(), entry.trainable)?;
        }
        Ok(())
    }

    pub fn map_tensors(&self, mut f: impl FnMut(&Tensor) -> Tensor) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            tensor: f(&e.tensor),
                            trainable: e.trainable,
                        },
                    )
                })
                .collect(),
        }
    }
}
