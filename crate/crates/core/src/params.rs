//! Named parameter storage shared by every layer, and the per-forward session
//! that binds stored tensors onto a fresh tape.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Persistent state that is not trained (running statistics, temperature).
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<T>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, tensor: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::State(format!("parameter `{name}` registered twice")));
        }
        let tensor = match kind {
            ParamKind::Trainable => tensor.with_grad(),
            ParamKind::Buffer => tensor,
        };
        self.entries.push(ParamEntry {
            name: name.to_string(),
            kind,
            tensor,
        });
        self.by_name
            .insert(name.to_string(), self.entries.len() - 1);
        Ok(ParamId(self.entries.len() - 1))
    }

    fn entry(&self, id: ParamId) -> Result<&ParamEntry<T>> {
        self.entries
            .get(id.0)
            .ok_or_else(|| Error::State(format!("parameter #{} is not initialized", id.0)))
    }

    pub fn get(&self, id: ParamId) -> Result<&Tensor<T>> {
        Ok(&self.entry(id)?.tensor)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Result<&mut Tensor<T>> {
        let n = self.entries.len();
        self.entries
            .get_mut(id.0)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::State(format!("parameter #{} of {n} is not initialized", id.0)))
    }

    pub fn name(&self, id: ParamId) -> Result<&str> {
        Ok(&self.entry(id)?.name)
    }

    pub fn kind(&self, id: ParamId) -> Result<ParamKind> {
        Ok(self.entry(id)?.kind)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.entries[id.0].kind == ParamKind::Trainable)
            .collect()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    /// Copies every value from `other`, which must hold the same names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Consistency(format!(
                "parameter stores hold {} and {} entries",
                self.len(),
                other.len()
            )));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(Error::Consistency(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    dst.name,
                    dst.tensor.shape(),
                    src.name,
                    src.tensor.shape()
                )));
            }
            dst.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }

    /// Replaces a stored value by name, keeping the declared shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Consistency(format!("unknown parameter `{name}`")))?;
        let slot = &mut self.entries[id.0].tensor;
        if slot.shape() != value.shape() {
            return Err(Error::Consistency(format!(
                "parameter `{name}` has shape {:?}, loaded {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        slot.data_mut().copy_from_slice(value.data());
        Ok(())
    }
}

/// One forward (and optionally backward) pass over a parameter store.
pub struct Session<'s, T: Scalar> {
    pub tape: Tape<T>,
    store: &'s mut ParamStore<T>,
    bound: HashMap<ParamId, Var>,
    training: bool,
}

impl<'s, T: Scalar> Session<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, training: bool) -> Self {
        Session {
            tape: Tape::new(),
            store,
            bound: HashMap::new(),
            training,
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        self.store
    }

    /// The tape variable for a stored parameter, recorded on first use.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let t = self.store.get(id)?.clone();
        let v = self.tape.leaf(t);
        self.bound.insert(id, v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.tape.leaf(t)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        self.tape.value(v)
    }

    /// Batch normalization with the running statistics held in the store.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> Result<Var> {
        let g = self.param(gamma)?;
        let b = self.param(beta)?;
        let mut rm = self.store.get(running_mean)?.clone();
        let mut rv = self.store.get(running_var)?.clone();
        let y = self
            .tape
            .batch_norm(x, g, b, (rm.data_mut(), rv.data_mut()), self.training)?;
        if self.training {
            *self.store.get_mut(running_mean)? = rm;
            *self.store.get_mut(running_var)? = rv;
        }
        Ok(y)
    }

    /// Backpropagates `loss` and accumulates gradients into the trainable
    /// parameters that took part in the pass. Returns the loss value.
    pub fn backward(self, loss: Var) -> Result<T> {
        let value = self.tape.value(loss)?.data()[0];
        let grads = self.tape.backward(loss)?;
        for (id, var) in self.bound {
            if self.store.kind(id)? != ParamKind::Trainable {
                continue;
            }
            if let Some(g) = grads.get(var) {
                self.store.get_mut(id)?.accumulate_grad(g)?;
            }
        }
        Ok(value)
    }
}
