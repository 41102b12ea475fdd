//! Named, ordered store of trainable tensors.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::tape::{Gradients, Tape, Var};
use crate::numerics::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`]. Stable for the lifetime
/// of the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Parameters are kept in insertion order; that order is the canonical one
/// for checkpoints and optimizer state.
#[derive(Default)]
pub struct ParamStore {
    items: Vec<(String, Tensor)>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.items.len();
        self.index.insert(name.clone(), id);
        self.items.push((name, tensor));
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.items[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.items[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.items[id.0].0
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.items
            .iter()
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in &mut self.items {
            t.zero_grad();
        }
    }

    pub fn total_elements(&self) -> usize {
        self.items.iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every parameter on `tape` (in store order) and returns the
    /// resulting tape handles, aligned with [`ParamId`] indices.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self.items.iter().map(|(_, t)| tape.input(t)).collect();
        BoundParams { vars }
    }
}

/// Tape handles for every parameter of a store, produced by
/// [`ParamStore::bind`] for one forward pass.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Adds the tape gradients of this pass into each parameter's grad
    /// accumulator. Parameters the loss never reached accumulate zero (the
    /// grad slot is still materialized).
    pub fn accumulate(&self, grads: &Gradients, store: &mut ParamStore) -> Result<()> {
        if self.vars.len() != store.len() {
            return Err(Error::contract(
                "bound parameter count does not match the store".to_string(),
            ));
        }
        for (i, &v) in self.vars.iter().enumerate() {
            let t = store.get_mut(ParamId(i));
            match grads.get(v) {
                Some(g) => t.accumulate_grad(g),
                None => {
                    t.grad_mut(); // materialize zeros
                }
            }
        }
        Ok(())
    }
}
