use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::numcore::real::Real;
use crate::numcore::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Real = f32> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Named parameter tensors, ordered by name.
///
/// Names are `/`-separated paths such as `adapter/level0/proj/w`. Frozen
/// entries are read by forward passes but never receive gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Result<()> {
        let name = name.into();
        ensure!(!name.is_empty(), "parameter name must not be empty");
        ensure!(
            !self.entries.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.entries.insert(name, Param { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|p| p.trainable)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|p| p.tensor.len()).sum()
    }

    /// Marks every entry under `prefix` as trainable or frozen.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn freeze_all(&mut self) {
        self.entries.values_mut().for_each(|p| p.trainable = false);
    }

    /// Moves every entry of `other` into `self`; names must not collide.
    pub fn merge(&mut self, other: ParamStore<T>) -> Result<()> {
        for (name, p) in other.entries {
            self.insert(name, p.tensor, p.trainable)?;
        }
        Ok(())
    }

    /// Entries under `prefix`, with the prefix kept.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Copies every entry under `from` to the same path under `to`.
    pub fn copy_prefix(&mut self, from: &str, to: &str, trainable: bool) -> Result<()> {
        let copies: Vec<(String, Tensor<T>)> = self
            .entries
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(from)
                    .map(|rest| (format!("{to}{rest}"), v.tensor.clone()))
            })
            .collect();
        for (name, t) in copies {
            self.insert(name, t, trainable)?;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// SHA-256 over names, dims and the f64 bit patterns of every value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.entries {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in p.tensor.dims() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
