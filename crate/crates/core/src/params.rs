//! Named parameter arrays shared by the encoder, decoder, teacher and optimizer.

use std::collections::BTreeMap;

use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Ix1, Ix2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Ordered map from parameter name to array. Iteration order is the
/// lexicographic name order, so hashing and serialization are stable.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    arrays: BTreeMap<String, ArrayD<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.arrays.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.arrays.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.arrays.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.arrays.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.arrays.keys()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.arrays.values().map(|a| a.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arrays: self
                .arrays
                .iter()
                .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
                .collect(),
        }
    }

    /// Panicking 2-D lookup for internal use where the layout is known.
    pub fn mat(&self, name: &str) -> ArrayView2<'_, f64> {
        self.arrays
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap_or_else(|_| panic!("parameter {name} is not 2-D"))
    }

    pub fn vec(&self, name: &str) -> ArrayView1<'_, f64> {
        self.arrays
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap_or_else(|_| panic!("parameter {name} is not 1-D"))
    }

    pub fn mat_mut(&mut self, name: &str) -> ArrayViewMut2<'_, f64> {
        self.arrays
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .view_mut()
            .into_dimensionality::<Ix2>()
            .unwrap_or_else(|_| panic!("parameter {name} is not 2-D"))
    }

    pub fn vec_mut(&mut self, name: &str) -> ArrayViewMut1<'_, f64> {
        self.arrays
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .view_mut()
            .into_dimensionality::<Ix1>()
            .unwrap_or_else(|_| panic!("parameter {name} is not 1-D"))
    }

    /// Check that `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        let mut bad: Vec<String> = Vec::new();
        for (name, a) in &self.arrays {
            match other.arrays.get(name) {
                Some(b) if b.shape() == a.shape() => {}
                _ => bad.push(name.clone()),
            }
        }
        for name in other.arrays.keys() {
            if !self.arrays.contains_key(name) {
                bad.push(name.clone());
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "parameter sets differ in names/shapes: {}",
                bad.join(", ")
            )))
        }
    }

    /// `self += scale * other`, elementwise over matching names.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) {
        for (name, a) in self.arrays.iter_mut() {
            if let Some(b) = other.arrays.get(name) {
                a.scaled_add(scale, b);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.arrays.values_mut() {
            a.mapv_inplace(|v| v * s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.values().all(|a| a.iter().all(|v| v.is_finite()))
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        for (name, a) in &self.arrays {
            h.update(name.as_bytes());
            for d in a.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in a.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Euclidean distance between two compatible sets.
    pub fn distance(&self, other: &ParamSet) -> f64 {
        let mut acc = 0.0;
        for (name, a) in &self.arrays {
            if let Some(b) = other.arrays.get(name) {
                acc += a
                    .iter()
                    .zip(b.iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>();
            }
        }
        acc.sqrt()
    }
}

/// Gaussian truncated to two standard deviations by resampling.
pub fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(shape, || loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    })
}
