use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use super::tensor::{Real, Tensor};
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
    pub grad: Option<Vec<T>>,
    /// Buffers (batch-norm running statistics) are stored alongside weights
    /// but never receive gradients.
    pub trainable: bool,
}

/// Registry of named parameters and buffers, in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    names: BTreeMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            names: BTreeMap::new(),
        }
    }

    fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> ParamId {
        assert!(!self.names.contains_key(name), "duplicate parameter {name}");
        let id = self.entries.len();
        self.names.insert(name.to_string(), id);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value: Arc::new(value),
            grad: None,
            trainable,
        });
        ParamId(id)
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.insert(name, value, false)
    }

    /// Kaiming-uniform weight with bound `1 / sqrt(fan_in)`.
    pub fn add_kaiming<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(rng.gen_range(-bound..bound)))
            .collect();
        self.add(name, Tensor::from_vec(shape, data).expect("shape product"))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.entries[id.0].value)
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.value.shape() != value.shape() {
            return Err(shape_err!(
                "parameter {} has shape {:?}, got {:?}",
                slot.name,
                slot.value.shape(),
                value.shape()
            ));
        }
        slot.value = Arc::new(value);
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> Option<&[T]> {
        self.entries[id.0].grad.as_deref()
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[T]) {
        let e = &mut self.entries[id.0];
        match e.grad.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => e.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    pub fn count(&self, ids: &[ParamId]) -> usize {
        ids.iter()
            .filter(|id| self.is_trainable(**id))
            .map(|id| self.value(*id).len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: Arc::new(e.value.cast()),
                    grad: None,
                    trainable: e.trainable,
                })
                .collect(),
            names: self.names.clone(),
        }
    }

    /// Replaces every value from `other`, which must have the same layout.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Format(format!(
                "parameter count mismatch: {} vs {}",
                other.len(),
                self.len()
            )));
        }
        for (mine, theirs) in self.entries.iter_mut().zip(&other.entries) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(Error::Format(format!(
                    "parameter layout mismatch at {}",
                    mine.name
                )));
            }
            mine.value = Arc::clone(&theirs.value);
        }
        Ok(())
    }
}
