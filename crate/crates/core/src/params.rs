//! Named parameter storage and the per-step [`Session`] that binds
//! parameters onto a fresh tape.

use std::cell::{Cell, RefCell, RefMut};
use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::moe::UsageHistogram;
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Insertion-ordered collection of named tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::param(format!("duplicate parameter name {name}")));
        }
        self.lookup.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Ids whose name starts with `prefix`, in insertion order.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(id, _, _)| id)
            .collect()
    }

    /// Concatenation of the given parameters' values.
    pub fn flatten(&self, ids: &[ParamId]) -> Vec<f64> {
        ids.iter().flat_map(|&id| self.get(id).data().iter().copied()).collect()
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn assign_flat(&mut self, ids: &[ParamId], flat: &[f64]) -> Result<()> {
        let total: usize = ids.iter().map(|&id| self.get(id).numel()).sum();
        if total != flat.len() {
            return Err(Error::param(format!("assign_flat: {} values for {total} slots", flat.len())));
        }
        let mut off = 0;
        for &id in ids {
            let t = self.get_mut(id);
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// Compute counters accumulated during one session.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardStats {
    /// Tokens passed through a gate (one per token per MoE-bearing layer).
    pub gate_calls: usize,
    /// (token, expert) pairs actually evaluated.
    pub expert_evals: usize,
    /// Scalar multiply-adds spent in projection layers.
    pub projection_mults: u64,
}

/// One forward/backward step: a tape, lazily bound parameters, a seeded
/// generator for gate noise and dropout, and compute counters.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: RefCell<Vec<Option<Var>>>,
    trainable: bool,
    rng: RefCell<ChaCha8Rng>,
    stats: Cell<ForwardStats>,
    usage: RefCell<Option<UsageHistogram>>,
}

impl<'a> Session<'a> {
    /// Parameters are bound as gradient-receiving leaves.
    pub fn new(store: &'a ParamStore, seed: u64) -> Self {
        Self::build(store, seed, true)
    }

    /// Parameters are bound as constants; for evaluation.
    pub fn frozen(store: &'a ParamStore, seed: u64) -> Self {
        Self::build(store, seed, false)
    }

    fn build(store: &'a ParamStore, seed: u64, trainable: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: RefCell::new(vec![None; store.len()]),
            trainable,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            stats: Cell::new(ForwardStats::default()),
            usage: RefCell::new(None),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var {
        let mut bound = self.bound.borrow_mut();
        *bound[id.0].get_or_insert_with(|| {
            let value = self.store.get(id).clone();
            if self.trainable {
                self.tape.leaf(value)
            } else {
                self.tape.constant(value)
            }
        })
    }

    pub fn constant(&self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn rng(&self) -> RefMut<'_, ChaCha8Rng> {
        self.rng.borrow_mut()
    }

    pub fn stats(&self) -> ForwardStats {
        self.stats.get()
    }

    pub(crate) fn bump(&self, f: impl FnOnce(&mut ForwardStats)) {
        let mut s = self.stats.get();
        f(&mut s);
        self.stats.set(s);
    }

    /// Starts collecting expert-usage counts from every routed layer.
    pub fn record_usage(&self) {
        *self.usage.borrow_mut() = Some(UsageHistogram::default());
    }

    pub(crate) fn usage_mut(&self) -> RefMut<'_, Option<UsageHistogram>> {
        self.usage.borrow_mut()
    }

    pub fn take_usage(&self) -> Option<UsageHistogram> {
        self.usage.borrow_mut().take()
    }

    /// Per-parameter gradients, indexed like the store. Unused parameters
    /// get `None`.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.bound
            .borrow()
            .iter()
            .map(|b| b.and_then(|v| grads.get(v).cloned()))
            .collect()
    }
}
