use std::cell::RefCell;
use std::collections::HashMap;

use indexmap::IndexMap;

use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors, kept in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name, which is a model-construction bug.
    pub fn add(&mut self, name: impl Into<String>, init: Tensor) -> ParamId {
        let name = name.into();
        let (idx, prev) = self.params.insert_full(name.clone(), init);
        assert!(prev.is_none(), "duplicate parameter name {name}");
        ParamId(idx)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).map(|(k, _)| k.as_str()).expect("param id")
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn total_elements(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }
}

/// A forward pass over a [`ParamStore`]: binds each parameter to one tape leaf
/// on first use.
pub struct Binding<'t> {
    tape: &'t Tape,
    store: &'t ParamStore,
    bound: RefCell<HashMap<ParamId, Var<'t>>>,
}

impl<'t> Binding<'t> {
    pub fn new(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Self { tape, store, bound: RefCell::new(HashMap::new()) }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'t ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        *self.bound.borrow_mut().entry(id).or_insert_with(|| self.tape.leaf(self.store.get(id).clone()))
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    /// Gradient per parameter, in store order; `None` for parameters the pass never touched.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        let bound = self.bound.borrow();
        self.store.ids().map(|id| bound.get(&id).and_then(|v| grads.get(*v).cloned())).collect()
    }
}
