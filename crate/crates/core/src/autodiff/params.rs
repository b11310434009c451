use std::collections::HashMap;

use super::tape::{SpikeMode, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Carried state such as running statistics; never differentiated.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
}

/// Named parameter tensors, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, value: Tensor, kind: ParamKind) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter name `{name}`");
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), value, kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.insert(name, value, ParamKind::Trainable)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> ParamId {
        self.insert(name, value, ParamKind::Buffer)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
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

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == ParamKind::Trainable).map(|e| e.value.numel()).sum()
    }

    /// Overwrites values from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: expected {} tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for e in &mut self.entries {
            let src = other
                .by_name(&e.name)
                .ok_or_else(|| Error::Checkpoint(format!("architecture mismatch: missing `{}`", e.name)))?;
            if src.shape() != e.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "architecture mismatch: `{}` has shape {:?}, expected {:?}",
                    e.name,
                    src.shape(),
                    e.value.shape()
                )));
            }
            e.value = src.clone();
        }
        Ok(())
    }
}

/// A tape plus lazily bound parameter leaves.
pub struct Session<'p> {
    pub tape: Tape,
    store: &'p ParamStore,
    vars: Vec<Option<Var>>,
    differentiate: bool,
}

impl<'p> Session<'p> {
    /// `differentiate` makes trainable parameters gradient leaves.
    pub fn new(store: &'p ParamStore, differentiate: bool) -> Self {
        Self::with_spike_mode(store, differentiate, SpikeMode::Quantized)
    }

    pub fn with_spike_mode(store: &'p ParamStore, differentiate: bool, mode: SpikeMode) -> Self {
        Self { tape: Tape::with_spike_mode(mode), store, vars: vec![None; store.len()], differentiate }
    }

    /// Continues recording on an existing tape.
    pub fn from_tape(store: &'p ParamStore, tape: Tape, differentiate: bool) -> Self {
        Self { tape, store, vars: vec![None; store.len()], differentiate }
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let e = self.store.entry(id);
        let rg = self.differentiate && e.kind == ParamKind::Trainable;
        let v = self.tape.leaf(e.value.clone(), rg);
        self.vars[id.0] = Some(v);
        v
    }

    /// Substitutes an existing tape value for a parameter (used by gradchecks).
    pub fn override_param(&mut self, id: ParamId, v: Var) {
        self.vars[id.0] = Some(v);
    }

    /// Gradients of every bound trainable parameter after `tape.backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                let g = self.tape.grad(v)?;
                Some((ParamId(i), g.clone()))
            })
            .collect()
    }
}
