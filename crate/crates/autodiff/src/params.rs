use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{AutodiffError, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

/// Fan-in of a weight tensor: product of every axis but the output axis
/// (`[C_out, C_in, k, k]` for conv kernels, `[in, out]` for linear weights).
pub fn fan_in(shape: &[usize], output_axis: usize) -> usize {
    shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != output_axis)
        .map(|(_, &d)| d)
        .product()
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
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

    /// Kaiming-uniform weights, `U(-√(6/fan_in), √(6/fan_in))`, drawn from
    /// the stream named after the parameter.
    pub fn init_kaiming_uniform(&mut self, seed: u64, name: &str, shape: &[usize], fan_in: usize) {
        let bound = (6.0 / fan_in as f64).sqrt();
        let mut r = rng::stream(seed, name);
        self.insert(name, Tensor::uniform(shape, -bound, bound, &mut r));
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn init_ones(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::full(shape, 1.0));
    }

    /// Normal(0, std²) values from the named stream.
    pub fn init_normal(&mut self, seed: u64, name: &str, shape: &[usize], std: f64) {
        let mut r = rng::stream(seed, name);
        let mut t = Tensor::randn(shape, &mut r);
        t.data_mut().iter_mut().for_each(|v| *v *= std);
        self.insert(name, t);
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
