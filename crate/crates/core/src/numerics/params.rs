//! Named parameter storage and per-pass binding onto a [`Tape`].

use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// Buffers (batch-norm running statistics) are stored but never trained.
    pub trainable: bool,
}

/// Ordered collection of named tensors. Names are stable and unique.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) -> ParamId {
        assert!(self.find(name).is_none(), "duplicate parameter name {name}");
        self.entries.push(ParamEntry { name: name.to_string(), tensor, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> ParamId {
        self.insert(name, tensor, true)
    }

    pub fn add_buffer(&mut self, name: &str, tensor: Tensor) -> ParamId {
        self.insert(name, tensor, false)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn set(&mut self, id: ParamId, tensor: Tensor) {
        assert_eq!(tensor.shape(), self.entries[id.0].tensor.shape(), "shape change for {}", self.entries[id.0].name);
        self.entries[id.0].tensor = tensor;
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
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

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|id| self.entries[id.0].trainable).collect()
    }

    /// Total trainable scalar count among `ids`.
    pub fn count(&self, ids: &[ParamId]) -> usize {
        ids.iter().filter(|id| self.entries[id.0].trainable).map(|id| self.get(*id).numel()).sum()
    }
}

/// One forward pass: binds store tensors onto a tape as they are first used
/// and collects buffer updates produced in train mode.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    mode: Mode,
    updates: Vec<(ParamId, Tensor)>,
}

impl<'a> Forward<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, mode: Mode) -> Self {
        Self { tape, store, vars: vec![None; store.len()], mode, updates: Vec::new() }
    }

    /// Start from parameters already registered on `tape` (used by gradient
    /// checks that perturb leaf values directly).
    pub fn with_bound(tape: &'a mut Tape, store: &'a ParamStore, mode: Mode, bound: &[(ParamId, Var)]) -> Self {
        let mut f = Self::new(tape, store, mode);
        for (id, var) in bound {
            f.vars[id.0] = Some(*var);
        }
        f
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Tape handle for parameter `id`; trainable tensors carry gradients.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let e = self.store.entry(id);
        let v = self.tape.leaf(e.tensor.clone(), e.trainable);
        self.vars[id.0] = Some(v);
        v
    }

    pub fn push_update(&mut self, id: ParamId, value: Tensor) {
        self.updates.push((id, value));
    }

    pub fn take_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.updates)
    }

    /// Gradients of every bound trainable parameter.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                if !self.store.entries[i].trainable {
                    return None;
                }
                grads.get(v).map(|g| (ParamId(i), g.clone()))
            })
            .collect()
    }
}

/// Apply collected buffer updates to the store.
pub fn apply_updates(store: &mut ParamStore, updates: Vec<(ParamId, Tensor)>) {
    for (id, t) in updates {
        store.set(id, t);
    }
}
