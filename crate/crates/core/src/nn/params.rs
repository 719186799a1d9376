use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Var};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a named tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
struct Entry<T> {
    name: String,
    tensor: Tensor<T>,
    trainable: bool,
}

/// Named parameters and buffers (batch-norm running statistics) of a model.
///
/// Names are stable dotted paths such as `A.stage1.conv.weight`; they are the
/// keys of the checkpoint container.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    pending_grads: bool,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            pending_grads: false,
        }
    }

    fn insert(&mut self, name: &str, tensor: Tensor<T>, trainable: bool) -> ParamId {
        assert!(
            self.find(name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(Entry {
            name: name.to_string(),
            tensor,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Registers a trainable parameter (its gradient buffer is allocated).
    pub fn add_param(&mut self, name: &str, tensor: Tensor<T>) -> ParamId {
        self.insert(name, tensor.with_grad(), true)
    }

    /// Registers a non-trainable buffer.
    pub fn add_buffer(&mut self, name: &str, tensor: Tensor<T>) -> ParamId {
        self.insert(name, tensor, false)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
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

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.tensor.numel()).sum()
    }

    /// Overwrites the value of `name`, keeping its gradient state.
    pub fn set_value(&mut self, name: &str, data: &[T], shape: &[usize]) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Config(alloc::format!("unknown parameter {name}")))?;
        let t = &mut self.entries[id.0].tensor;
        if t.shape() != shape {
            return Err(Error::dim("set_value", t.shape(), shape));
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    pub fn has_pending_grads(&self) -> bool {
        self.pending_grads
    }

    pub(crate) fn clear_pending(&mut self) {
        self.pending_grads = false;
    }

    /// Global L2 norm of all trainable gradients.
    pub fn grad_norm(&self) -> f64 {
        let mut s = 0.0;
        for e in &self.entries {
            if let Some(g) = e.tensor.grad() {
                s += g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
            }
        }
        libm::sqrt(s)
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let s = T::lit(max_norm / norm);
            for e in &mut self.entries {
                if let Some(g) = e.tensor.grad_mut() {
                    g.iter_mut().for_each(|v| *v = *v * s);
                }
            }
        }
        norm
    }

    /// Starts a forward pass. With `track_grads` the trainable parameters
    /// become differentiable leaves of the pass graph.
    pub fn pass(&self, mode: Mode, track_grads: bool) -> Pass<'_, T> {
        Pass {
            store: self,
            graph: Graph::new(),
            vars: alloc::vec![None; self.entries.len()],
            mode,
            track_grads,
            bn_stats: Vec::new(),
        }
    }

    /// Folds the gradients and batch statistics collected by a finished pass
    /// into the store. Gradients accumulate until [`ParamStore::zero_grad`].
    pub fn absorb(&mut self, outcome: PassOutcome<T>, bn_decay: f64) -> Result<()> {
        for (id, g) in &outcome.grads {
            self.entries[id.0].tensor.accumulate_grad(g)?;
        }
        if !outcome.grads.is_empty() {
            self.pending_grads = true;
        }
        let d = T::lit(bn_decay);
        let one_minus = T::lit(1.0 - bn_decay);
        for (mean_id, var_id, stats) in outcome.bn_stats {
            for (r, b) in self.entries[mean_id.0].tensor.data_mut().iter_mut().zip(&stats.mean) {
                *r = d * *r + one_minus * *b;
            }
            for (r, b) in self.entries[var_id.0].tensor.data_mut().iter_mut().zip(&stats.var) {
                *r = d * *r + one_minus * *b;
            }
        }
        Ok(())
    }
}

/// Train mode uses batch statistics in batch norm; eval mode the running ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward (and optionally backward) evaluation over a borrowed store.
pub struct Pass<'a, T> {
    store: &'a ParamStore<T>,
    pub graph: Graph<T>,
    vars: Vec<Option<Var>>,
    mode: Mode,
    track_grads: bool,
    bn_stats: Vec<(ParamId, ParamId, BatchStats<T>)>,
}

/// What a pass hands back to the store.
pub struct PassOutcome<T> {
    pub grads: Vec<(ParamId, Vec<T>)>,
    pub bn_stats: Vec<(ParamId, ParamId, BatchStats<T>)>,
}

impl<'a, T: Scalar> Pass<'a, T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    /// Binds a parameter into the graph (once per pass).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let e = &self.store.entries[id.0];
        let v = self
            .graph
            .input(e.tensor.shape(), e.tensor.data().to_vec(), self.track_grads && e.trainable)
            .expect("stored tensor is consistent");
        self.vars[id.0] = Some(v);
        v
    }

    pub(crate) fn record_bn(&mut self, mean: ParamId, var: ParamId, stats: BatchStats<T>) {
        self.bn_stats.push((mean, var, stats));
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.graph.backward(loss)
    }

    pub fn finish(self) -> PassOutcome<T> {
        let grads = self
            .vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.graph.grad(v).map(|g| (ParamId(i), g.to_vec()))
            })
            .collect();
        PassOutcome {
            grads,
            bn_stats: self.bn_stats,
        }
    }
}

/// Glorot/Xavier uniform samples in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<T: Scalar>(rng: &mut Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<T> {
    let limit = libm::sqrt(6.0 / (fan_in + fan_out).max(1) as f64);
    (0..n).map(|_| T::lit(rng.gen_range(-limit..limit))).collect()
}
