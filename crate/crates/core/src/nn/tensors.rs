use std::collections::BTreeMap;

use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayViewD, Ix1, Ix2, IxDyn};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Named tensors, ordered by name. Used both for parameters and their gradients.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorMap<T> {
    tensors: BTreeMap<String, ArrayD<T>>,
}

impl<T: Scalar> TensorMap<T> {
    pub fn new() -> Self {
        TensorMap {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: ArrayD<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Weights(format!("missing tensor `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn mat(&self, name: &str) -> Result<ArrayView2<'_, T>> {
        self.get(name)?
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::Weights(format!("tensor `{name}` is not a matrix")))
    }

    pub fn vector(&self, name: &str) -> Result<ArrayView1<'_, T>> {
        self.get(name)?
            .view()
            .into_dimensionality::<Ix1>()
            .map_err(|_| Error::Weights(format!("tensor `{name}` is not a vector")))
    }

    /// Adds `delta` into `name`, creating a zero tensor of the same shape first if needed.
    pub fn accumulate(&mut self, name: &str, delta: ArrayViewD<'_, T>) {
        match self.tensors.get_mut(name) {
            Some(t) => *t += &delta,
            None => {
                self.tensors.insert(name.to_string(), delta.to_owned());
            }
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        TensorMap {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), ArrayD::zeros(IxDyn(v.shape()))))
                .collect(),
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors.values_mut() {
            t.mapv_inplace(|v| v * s);
        }
    }

    /// Adds every tensor of `other` into `self`.
    pub fn add_assign(&mut self, other: &TensorMap<T>) {
        for (k, v) in &other.tensors {
            self.accumulate(k, v.view());
        }
    }

    pub fn all_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
            .map(|(k, _)| k.as_str())
    }

    pub fn cast<U: Scalar>(&self) -> TensorMap<U> {
        TensorMap {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| U::of(x.as_f64()))))
                .collect(),
        }
    }
}
