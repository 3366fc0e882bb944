//! Named parameter collections with frozen flags.

use std::collections::HashMap;

use crate::error::{CoreError, Result};
use crate::tensor::{NodeId, Tape, Tensor};

/// Ordered, named map of parameter tensors. Iteration order is insertion
/// order everywhere, so hashing and optimizer state stay deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: &str, tensor: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total number of scalar parameters.
    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Number of scalar parameters with `requires_grad`.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn set_all_requires_grad(&mut self, flag: bool) {
        for (_, t) in self.entries.iter_mut() {
            t.set_requires_grad(flag);
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            t.zero_grad();
        }
    }

    /// FNV-1a over names, shapes, frozen flags, and little-endian payloads.
    /// Used to assert the frozen-backbone invariant bit-for-bit.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        };
        for (name, t) in &self.entries {
            eat(name.as_bytes());
            eat(&[t.requires_grad() as u8]);
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                eat(&v.to_le_bytes());
            }
        }
        h
    }

    /// Register every parameter as a tape leaf, returning ids aligned with
    /// entry order.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundParams> {
        let mut ids = Vec::with_capacity(self.entries.len());
        for (_, t) in &self.entries {
            ids.push(tape.leaf(t)?);
        }
        Ok(BoundParams { ids })
    }

    /// Accumulate tape gradients back into the parameter tensors.
    pub fn pull_grads(&mut self, tape: &Tape, bound: &BoundParams) -> Result<()> {
        if bound.ids.len() != self.entries.len() {
            return Err(CoreError::contract(
                "pull_grads: bound ids misaligned with parameter set",
            ));
        }
        for ((_, t), &id) in self.entries.iter_mut().zip(&bound.ids) {
            if !t.requires_grad() {
                continue;
            }
            if let Some(g) = tape.grad(id) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

/// Tape leaf ids for one `ParamSet::bind` call.
#[derive(Debug, Clone)]
pub struct BoundParams {
    ids: Vec<NodeId>,
}

impl BoundParams {
    pub fn id(&self, set: &ParamSet, name: &str) -> NodeId {
        let idx = *set
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.ids[idx]
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}
