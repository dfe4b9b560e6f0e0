use std::collections::BTreeMap;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// A learnable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub id: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Stable handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey(pub(crate) usize);

impl ParamKey {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Registry of every parameter of a model, addressable by id.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_id: BTreeMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_id: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, id: impl Into<String>, value: Tensor<T>) -> Result<ParamKey> {
        let id = id.into();
        if self.by_id.contains_key(&id) {
            return Err(Error::Configuration(format!("duplicate parameter id `{id}`")));
        }
        let key = ParamKey(self.params.len());
        self.by_id.insert(id.clone(), key.0);
        let grad = value.zeros_like();
        self.params.push(Param { id, value, grad });
        Ok(key)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar coordinates.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, key: ParamKey) -> &Param<T> {
        &self.params[key.0]
    }

    pub fn get_mut(&mut self, key: ParamKey) -> &mut Param<T> {
        &mut self.params[key.0]
    }

    pub fn value(&self, key: ParamKey) -> &Tensor<T> {
        &self.params[key.0].value
    }

    pub fn key_of(&self, id: &str) -> Option<ParamKey> {
        self.by_id.get(id).copied().map(ParamKey)
    }

    pub fn by_id(&self, id: &str) -> Option<&Param<T>> {
        self.key_of(id).map(|k| self.get(k))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Parameters in id order (the checkpoint order).
    pub fn iter_sorted(&self) -> impl Iterator<Item = &Param<T>> {
        self.by_id.values().map(|&i| &self.params[i])
    }

    pub fn keys(&self) -> impl Iterator<Item = ParamKey> {
        (0..self.params.len()).map(ParamKey)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = p.value.zeros_like();
        }
    }

    /// Adds a gradient sink produced by a backward pass into the stored grads.
    pub fn accumulate(&mut self, grads: &Grads<T>) -> Result<()> {
        for (i, g) in grads.slots.iter().enumerate() {
            if let Some(g) = g {
                self.params[i].grad.add_assign(g)?;
            }
        }
        Ok(())
    }

    /// Replace a value, keeping the shape contract.
    pub fn set_value(&mut self, key: ParamKey, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[key.0];
        p.value.expect_same_shape(&value, &p.id)?;
        p.value = value;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    id: p.id.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
            by_id: self.by_id.clone(),
        }
    }
}

/// Gradient sink filled by backward closures, one optional slot per param.
#[derive(Clone, Debug)]
pub struct Grads<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn for_store(store: &ParamStore<T>) -> Self {
        Self::with_len(store.len())
    }

    pub fn with_len(len: usize) -> Self {
        Self { slots: vec![None; len] }
    }

    /// Moves every slot of `other` into `self`, summing collisions.
    pub fn merge(&mut self, other: Grads<T>) -> Result<()> {
        for (i, g) in other.slots.into_iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamKey(i), g)?;
            }
        }
        Ok(())
    }

    pub fn add(&mut self, key: ParamKey, g: Tensor<T>) -> Result<()> {
        match &mut self.slots[key.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    pub fn get(&self, key: ParamKey) -> Option<&Tensor<T>> {
        self.slots[key.0].as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_ids_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.register("a.weight", Tensor::zeros([1, 1, 1, 1])).unwrap();
        assert!(store.register("a.weight", Tensor::zeros([1, 1, 1, 1])).is_err());
    }

    #[test]
    fn accumulate_adds_into_grads() {
        let mut store = ParamStore::<f64>::new();
        let k = store.register("w", Tensor::zeros([1, 1, 1, 2])).unwrap();
        let mut g = Grads::for_store(&store);
        g.add(k, Tensor::full([1, 1, 1, 2], 1.0)).unwrap();
        g.add(k, Tensor::full([1, 1, 1, 2], 2.0)).unwrap();
        store.accumulate(&g).unwrap();
        store.accumulate(&g).unwrap();
        assert_eq!(store.get(k).grad.data(), &[6.0, 6.0]);
        assert_eq!(store.get(k).grad.shape(), store.get(k).value.shape());
    }
}
