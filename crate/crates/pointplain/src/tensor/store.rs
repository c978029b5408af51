//! Named parameter storage.
//!
//! A `BTreeMap` keyed by parameter path keeps iteration order deterministic
//! (lexicographic), which the optimizer and the checkpoint format both rely
//! on. Non-trainable buffers (e.g. a fixed Fourier frequency matrix) live in
//! the same map with `requires_grad = false`.

use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
    pub rng_seed: u64,
}

impl ParameterStore {
    pub fn new(rng_seed: u64) -> Self {
        ParameterStore {
            params: BTreeMap::new(),
            rng_seed,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.params.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Deterministic (lexicographic) iteration over all entries.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Names of trainable parameters, lexicographic.
    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, t)| t.requires_grad)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_trainable_scalars(&self) -> usize {
        self.params
            .values()
            .filter(|t| t.requires_grad)
            .map(|t| t.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.params.values_mut() {
            t.grad = None;
        }
    }

    /// Adds `delta` into the named parameter's gradient, allocating a zeroed
    /// gradient on first touch.
    pub fn accumulate_grad(&mut self, name: &str, delta: &[f64]) -> Result<()> {
        let t = self.get_mut(name)?;
        if delta.len() != t.numel() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                lhs: t.shape().to_vec(),
                rhs: vec![delta.len()],
            });
        }
        let grad = t.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, &d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }
}
