//! Named parameter storage shared by every model in the workspace.
//!
//! Parameters live outside any tape; each forward pass binds them as leaves
//! through a [`Binder`], which hands back the same node for repeated uses so
//! gradients from different parts of the graph accumulate onto one buffer.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tape::{Tape, TensorId};

#[derive(Debug, Clone)]
pub struct Param {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Ordered name -> tensor map. Iteration order is the name order, which keeps
/// checkpoints, hashes, and optimizer sweeps deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "{name}");
        self.entries.insert(name.to_string(), Param { data, shape });
    }

    pub fn insert_zeros(&mut self, name: &str, shape: Vec<usize>) {
        let n = shape.iter().product();
        self.insert(name, shape, vec![0.0; n]);
    }

    pub fn insert_uniform(&mut self, name: &str, shape: Vec<usize>, bound: f64, init: &Stream) {
        let n = shape.iter().product();
        // Per-name fork: init draws do not depend on insertion order.
        let mut s = init.fork(name);
        self.insert(name, shape, s.uniform_vec(n, -bound, bound));
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.entries
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect()
    }

    /// FNV-1a over the little-endian bytes of the selected parameters.
    /// Used to prove frozen weights stayed bit-identical.
    pub fn fingerprint(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, p) in &self.entries {
            if !name.starts_with(prefix) {
                continue;
            }
            for b in name.bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            for v in &p.data {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Binds parameters onto a tape for one forward pass. Whether a parameter is
/// bound trainable is decided by the set of trainable names, so the same store
/// serves pretraining (encoder weights train) and prompt learning (they are
/// frozen constants).
pub struct Binder<'a> {
    store: &'a ParamStore,
    trainable: &'a BTreeSet<String>,
    bound: BTreeMap<String, TensorId>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, trainable: &'a BTreeSet<String>) -> Self {
        Binder {
            store,
            trainable,
            bound: BTreeMap::new(),
        }
    }

    pub fn bind(&mut self, tape: &mut Tape, name: &str) -> Result<TensorId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let p = self.store.get(name)?;
        let id = if self.trainable.contains(name) {
            tape.leaf(p.data.clone(), p.shape.clone(), name)
        } else {
            tape.constant(p.data.clone(), p.shape.clone())
        };
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }
}
