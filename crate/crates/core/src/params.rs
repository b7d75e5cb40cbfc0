//! Named parameter storage and per-pass binding into an autodiff graph.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{contract, Error, Result};
use crate::numerics::{Checkpoint, Gradients, Graph, NdArray, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Trained, with weight decay.
    Weight,
    /// Trained, no weight decay (biases, norm affine terms, embeddings).
    NoDecay,
    /// Running statistics; never receives gradient.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: NdArray,
    pub kind: ParamKind,
    /// Multiplier on the optimizer step size.
    pub lr_scale: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: NdArray, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, kind, lr_scale: 1.0 });
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &NdArray {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut NdArray {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn set_lr_scale(&mut self, id: ParamId, scale: f64) {
        self.entries[id.0].lr_scale = scale;
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
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

    /// Total scalar count of trainable parameters.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.kind != ParamKind::Buffer).map(|e| e.value.len()).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.entries.iter().enumerate().filter(move |(_, e)| e.name.starts_with(prefix)).map(|(i, _)| ParamId(i))
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        Checkpoint {
            tensors: self.entries.iter().map(|e| (e.name.clone(), e.value.clone())).collect(),
            meta,
        }
    }

    /// Copies values from `ck`; every parameter must be present with its shape.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        for e in &mut self.entries {
            let Some(t) = ck.get(&e.name) else {
                return Err(Error::Format {
                    path: "<checkpoint>".into(),
                    msg: format!("missing tensor {}", e.name),
                });
            };
            if t.shape() != e.value.shape() {
                return Err(Error::Format {
                    path: "<checkpoint>".into(),
                    msg: format!("tensor {} has shape {:?}, model expects {:?}", e.name, t.shape(), e.value.shape()),
                });
            }
            e.value = t.clone();
        }
        Ok(())
    }
}

/// One forward pass: a fresh graph plus lazily bound parameter leaves.
pub struct Ctx<'a> {
    graph: Graph,
    store: &'a ParamStore,
    bound: RefCell<Vec<Option<Tensor>>>,
    train: bool,
    buffer_updates: RefCell<Vec<(ParamId, NdArray)>>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, train: bool) -> Self {
        Self::with_graph(store, train, Graph::new(0))
    }

    pub fn with_graph(store: &'a ParamStore, train: bool, graph: Graph) -> Self {
        Self {
            graph,
            store,
            bound: RefCell::new(vec![None; store.len()]),
            train,
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// The graph leaf for `id`, created on first use. Buffers bind as constants.
    pub fn param(&self, id: ParamId) -> Tensor {
        let mut bound = self.bound.borrow_mut();
        if let Some(t) = &bound[id.0] {
            return t.clone();
        }
        let e = self.store.entry(id);
        let t = match e.kind {
            ParamKind::Buffer => self.graph.constant(e.value.clone()),
            _ => self.graph.leaf(e.value.clone()),
        };
        bound[id.0] = Some(t.clone());
        t
    }

    /// Uses the given tensors for these parameters instead of fresh leaves.
    pub fn bind(&self, pairs: impl IntoIterator<Item = (ParamId, Tensor)>) {
        let mut bound = self.bound.borrow_mut();
        for (id, t) in pairs {
            bound[id.0] = Some(t);
        }
    }

    pub fn constant(&self, value: NdArray) -> Tensor {
        self.graph.constant(value)
    }

    /// Gradients of every trainable parameter the backward pass reached.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, NdArray)> {
        self.bound
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, t)| {
                let t = t.as_ref()?;
                (self.store.entries[i].kind != ParamKind::Buffer && grads.reached(t))
                    .then(|| (ParamId(i), grads.get(t)))
            })
            .collect()
    }

    pub(crate) fn record_buffer(&self, id: ParamId, value: NdArray) {
        self.buffer_updates.borrow_mut().push((id, value));
    }

    /// Running-statistic updates produced during a training pass.
    pub fn take_buffer_updates(&self) -> Vec<(ParamId, NdArray)> {
        std::mem::take(&mut self.buffer_updates.borrow_mut())
    }
}

/// Applies buffer updates collected by [`Ctx::take_buffer_updates`].
pub fn apply_buffer_updates(store: &mut ParamStore, updates: Vec<(ParamId, NdArray)>) -> Result<()> {
    for (id, v) in updates {
        if store.get(id).shape() != v.shape() {
            return contract("buffer update shape mismatch");
        }
        *store.get_mut(id) = v;
    }
    Ok(())
}
