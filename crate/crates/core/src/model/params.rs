use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Named parameter tensors plus the set of names the optimizer must not touch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Array2<f64>>,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array2<f64>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<f64>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn freeze(&mut self, name: &str) {
        self.frozen.insert(name.to_string());
    }

    pub fn unfreeze(&mut self, name: &str) {
        self.frozen.remove(name);
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &String> {
        self.frozen.iter()
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys().filter(|n| !self.frozen.contains(*n))
    }

    /// Number of scalars the optimizer may update.
    pub fn trainable_count(&self) -> usize {
        self.trainable_names().map(|n| self.tensors[n].len()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// FNV-1a over the names and raw bits of every frozen tensor.
    pub fn frozen_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for name in &self.frozen {
            eat(name.as_bytes());
            if let Some(t) = self.tensors.get(name) {
                for v in t.iter() {
                    eat(&v.to_bits().to_le_bytes());
                }
            }
        }
        h
    }

    /// Adds Gaussian noise of the given scale to every tensor, frozen or not.
    ///
    /// Zero-initialised gates and heads make most gradients vanish at init;
    /// this gives gradient checks a generic point to test at.
    pub fn perturb(&mut self, rng: &mut impl Rng, scale: f64) {
        let normal = Normal::new(0.0, scale).expect("finite scale");
        for t in self.tensors.values_mut() {
            t.mapv_inplace(|v| v + normal.sample(rng));
        }
    }
}
