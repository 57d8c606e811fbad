use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Result, XfiError};

/// Learnable tensors keyed by dot-separated path. Iteration is lexicographic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. The tensor is marked as requiring gradients.
    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(XfiError::DuplicateParameter(name));
        }
        tensor.set_requires_grad(true);
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| XfiError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| XfiError::UnknownParameter(name.to_string()))
    }

    /// Overwrites the values of an existing parameter, keeping its shape.
    pub fn set_values(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let t = self.get_mut(name)?;
        if t.numel() != values.len() {
            return Err(XfiError::shape("set_values", t.shape(), &[values.len()]));
        }
        t.data_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Zeros every gradient buffer, allocating missing ones.
    pub fn zero_grad(&mut self) {
        for t in self.tensors.values_mut() {
            t.ensure_grad();
            t.zero_grad();
        }
    }
}
