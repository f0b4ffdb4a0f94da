//! Named parameter storage shared by every network in the model.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which optimizer (if any) owns a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Flow networks: HR/HF/LR/Deg flows, content extractor, MoG prior.
    Flow,
    /// The three patch discriminators.
    Discriminator,
    /// Never updated (feature proxy weights, fixed permutations).
    Frozen,
}

impl ParamGroup {
    pub fn code(self) -> u8 {
        match self {
            ParamGroup::Flow => 0,
            ParamGroup::Discriminator => 1,
            ParamGroup::Frozen => 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub group: ParamGroup,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), by_name: HashMap::new() }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, group: ParamGroup) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name `{name}`");
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, group });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids().filter(|&id| self.group(id) == group).collect()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter `{}` expects {}, got {}",
                e.name,
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    pub fn numel(&self, group: ParamGroup) -> usize {
        self.entries.iter().filter(|e| e.group == group).map(|e| e.value.numel()).sum()
    }

    /// Concatenation of the given parameters in order, as `f64`.
    pub fn flatten(&self, ids: &[ParamId]) -> Vec<f64> {
        ids.iter().flat_map(|&id| self.get(id).to_f64_vec()).collect()
    }

    /// Inverse of [`ParamStore::flatten`].
    pub fn unflatten(&mut self, ids: &[ParamId], flat: &[f64]) {
        let mut off = 0;
        for &id in ids {
            let t = self.get_mut(id);
            let n = t.numel();
            for (dst, &src) in t.data_mut().iter_mut().zip(&flat[off..off + n]) {
                *dst = T::from_f64(src);
            }
            off += n;
        }
        assert_eq!(off, flat.len(), "unflatten length mismatch");
    }

    /// Adds N(0, std²) noise to every parameter in `group`.
    ///
    /// Used by tests and the verify suite to move zero-initialized nets off the
    /// identity so that the checks are not vacuous.
    pub fn randomize(&mut self, group: ParamGroup, std: f64, rng: &mut impl Rng) {
        for e in self.entries.iter_mut().filter(|e| e.group == group) {
            let shape: Shape = e.value.shape();
            let noise = Tensor::<T>::randn(shape, std, rng);
            e.value.add_assign(&noise);
        }
    }

    /// Fingerprint of a parameter group's bytes; used to assert update scope.
    pub fn fingerprint(&self, group: ParamGroup) -> u64 {
        // FNV-1a over the little-endian encoding.
        let mut h: u64 = 0xcbf29ce484222325;
        let mut buf = Vec::new();
        for e in self.entries.iter().filter(|e| e.group == group) {
            buf.clear();
            for &v in e.value.data() {
                v.write_le(&mut buf);
            }
            for &b in &buf {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

/// Registers parameters under a dotted name prefix while drawing
/// initial values from one RNG.
pub struct ParamBuilder<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    group: ParamGroup,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng, group: ParamGroup) -> Self {
        ParamBuilder { store, rng, prefix: String::new(), group }
    }

    /// Child builder whose names are prefixed with `name.`.
    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        ParamBuilder { store: self.store, rng: self.rng, prefix, group: self.group }
    }

    /// Same prefix, different group.
    pub fn with_group(&mut self, group: ParamGroup) -> ParamBuilder<'_, T> {
        ParamBuilder { store: self.store, rng: self.rng, prefix: self.prefix.clone(), group }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        self.store.add(full, value, self.group)
    }

    /// Adds a parameter outside the builder's group (e.g. a frozen buffer).
    pub fn add_in(&mut self, name: &str, value: Tensor<T>, group: ParamGroup) -> ParamId {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        self.store.add(full, value, group)
    }
}
