//! Named parameter storage.
//!
//! A [`ParamStore`] owns plain buffers, so it is `Send` and can be cloned,
//! checkpointed and updated by the optimiser. [`ParamStore::bind`] turns it
//! into tape leaves for one forward pass.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.insert(
            name.into(),
            ParamTensor {
                shape: shape.to_vec(),
                data,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamTensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamTensor)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.entries.values().map(|p| p.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// SHA-256 over names, shapes and little-endian payloads.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, p) in &self.entries {
            h.update(name.as_bytes());
            for d in &p.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &p.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Creates one tape leaf per parameter.
    pub fn bind(&self, trainable: bool) -> Bound {
        let tensors = self
            .entries
            .iter()
            .map(|(k, p)| {
                let t = if trainable {
                    Tensor::param(&p.shape, p.data.clone())
                } else {
                    Tensor::new(&p.shape, p.data.clone())
                };
                (k.clone(), t.expect("store holds well-formed shapes"))
            })
            .collect();
        Bound { tensors }
    }
}

/// Parameters bound as tensors for one forward/backward pass.
pub struct Bound {
    tensors: BTreeMap<String, Tensor>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
    }

    pub fn scope<'a>(&'a self, prefix: &str) -> Scope<'a> {
        Scope {
            bound: self,
            prefix: prefix.to_string(),
        }
    }

    /// Gradients accumulated on every leaf (zeros where backward did not reach).
    pub fn grads(&self) -> BTreeMap<String, Vec<f64>> {
        self.tensors
            .iter()
            .map(|(k, t)| (k.clone(), t.grad().unwrap_or_else(|| vec![0.0; t.numel()])))
            .collect()
    }
}

#[derive(Clone)]
pub struct Scope<'a> {
    bound: &'a Bound,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn get(&self, name: &str) -> Result<&'a Tensor> {
        self.bound.get(&format!("{}.{}", self.prefix, name))
    }

    pub fn sub(&self, name: &str) -> Scope<'a> {
        Scope {
            bound: self.bound,
            prefix: format!("{}.{}", self.prefix, name),
        }
    }
}

/// Parameter initialisation helpers writing into a store under a prefix.
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    /// Normal(0, std) resampled outside ±2 std.
    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64) {
        let normal = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let v: f64 = normal.sample(self.rng);
                if v.abs() <= 2.0 * std {
                    break v;
                }
            })
            .collect();
        self.store.insert(name, shape, data);
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn fan_in_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.store.insert(name, shape, data);
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) {
        let n = shape.iter().product();
        self.store.insert(name, shape, vec![value; n]);
    }
}
