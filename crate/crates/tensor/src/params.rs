use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One named tensor with its gradient accumulator.
#[derive(Clone)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Optimised when true; running statistics and other buffers are not.
    pub trainable: bool,
}

/// Name-keyed parameter store. Iteration order is the sorted name order, so
/// walks over the set are deterministic for a given configuration.
#[derive(Clone)]
pub struct ParameterSet<T> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> Default for ParameterSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        let grad = Tensor::zeros(value.shape());
        self.entries.insert(
            name.to_string(),
            Param {
                value,
                grad,
                trainable,
            },
        );
        Ok(())
    }

    pub fn add_trainable(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        self.insert(name, value, false)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in sorted name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    /// Total number of scalar values held by trainable entries.
    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            for g in p.grad.data_mut() {
                *g = T::zero();
            }
        }
    }

    /// Casts every entry elementwise through `f64`.
    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            grad: p.grad.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }
}
