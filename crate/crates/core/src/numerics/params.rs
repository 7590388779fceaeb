use std::sync::Arc;

use indexmap::IndexMap;

use super::{Array, Real};
use crate::error::{Error, Result};

struct Entry<T> {
    value: Arc<Array<T>>,
    grad: Array<T>,
}

/// Named learnable arrays. Iteration order is insertion order.
pub struct ParamStore<T> {
    entries: IndexMap<String, Entry<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|(k, e)| {
                (
                    k.clone(),
                    Entry {
                        value: Arc::new((*e.value).clone()),
                        grad: e.grad.clone(),
                    },
                )
            })
            .collect();
        Self { entries }
    }
}

impl<T: Real> std::fmt::Debug for ParamStore<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map()
            .entries(self.entries.iter().map(|(k, e)| (k, e.value.shape())))
            .finish()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::arg("param_store", format!("duplicate parameter `{name}`")));
        }
        let grad = Array::zeros(value.shape());
        self.entries.insert(
            name,
            Entry {
                value: Arc::new(value),
                grad,
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn get(&self, name: &str) -> Option<&Array<T>> {
        self.entries.get(name).map(|e| e.value.as_ref())
    }

    pub fn value_at(&self, i: usize) -> &Array<T> {
        &self.entries[i].value
    }

    pub(crate) fn value_arc(&self, i: usize) -> Arc<Array<T>> {
        self.entries[i].value.clone()
    }

    /// Mutable access; copies the value if a live tape still shares it.
    pub fn value_mut_at(&mut self, i: usize) -> &mut Array<T> {
        Arc::make_mut(&mut self.entries[i].value)
    }

    pub fn set(&mut self, name: &str, value: Array<T>) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::arg("param_store", format!("unknown parameter `{name}`")))?;
        if e.value.shape() != value.shape() {
            return Err(Error::shape("param_store", e.value.shape(), value.shape()));
        }
        e.value = Arc::new(value);
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), e.value.as_ref()))
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn grad(&self, name: &str) -> Option<&Array<T>> {
        self.entries.get(name).map(|e| &e.grad)
    }

    pub fn grad_at(&self, i: usize) -> &Array<T> {
        &self.entries[i].grad
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds per-entry gradients, aligned with store order, into the grad slots.
    pub fn accumulate(&mut self, grads: &[Array<T>]) -> Result<()> {
        if grads.len() != self.entries.len() {
            return Err(Error::arg(
                "param_store",
                format!("{} gradients for {} parameters", grads.len(), self.entries.len()),
            ));
        }
        for (e, g) in self.entries.values_mut().zip(grads) {
            if e.grad.shape() != g.shape() {
                return Err(Error::shape("param_store", e.grad.shape(), g.shape()));
            }
            e.grad.add_assign(g);
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (k, e) in &self.entries {
            out.insert(k.clone(), e.value.cast()).expect("unique names");
        }
        out
    }
}
