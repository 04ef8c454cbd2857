use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use libm::{pow, sqrt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

/// Named parameters in insertion order, each with its Adam moments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore {
    entries: Vec<Entry>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a parameter; returns its slot. Panics on a duplicate name.
    pub fn add(&mut self, name: &str, value: Tensor) -> usize {
        assert!(self.index_of(name).is_none(), "duplicate parameter `{name}`");
        let n = value.len();
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn n_coordinates(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.entries[slot].name
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].value)
    }

    pub fn value(&self, slot: usize) -> &Tensor {
        &self.entries[slot].value
    }

    pub fn value_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.entries[slot].value
    }

    /// Zero-filled gradient buffers matching every parameter.
    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            tensors: self.entries.iter().map(|e| vec![0.0; e.value.len()]).collect(),
        }
    }

    /// Replace values (not moments) from a flat list in slot order.
    pub fn load_values(&mut self, values: &[Vec<f64>]) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::LengthMismatch {
                context: "parameter tensors",
                expected: self.entries.len(),
                found: values.len(),
            });
        }
        for (e, v) in self.entries.iter().zip(values) {
            if e.value.len() != v.len() {
                return Err(Error::LengthMismatch {
                    context: "parameter values",
                    expected: e.value.len(),
                    found: v.len(),
                });
            }
        }
        for (e, v) in self.entries.iter_mut().zip(values) {
            e.value.data_mut().copy_from_slice(v);
        }
        Ok(())
    }

    /// One bias-corrected Adam update. Nothing is modified if any gradient is
    /// non-finite.
    pub fn adam_step(&mut self, grads: &Gradients, cfg: &AdamConfig) -> Result<()> {
        if grads.tensors.len() != self.entries.len() {
            return Err(Error::LengthMismatch {
                context: "gradient tensors",
                expected: self.entries.len(),
                found: grads.tensors.len(),
            });
        }
        for (e, g) in self.entries.iter().zip(&grads.tensors) {
            if g.len() != e.value.len() {
                return Err(Error::ShapeMismatch {
                    context: "gradient vs parameter",
                    left: e.value.shape().to_vec(),
                    right: vec![g.len()],
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(e.name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - pow(cfg.beta1, t);
        let c2 = 1.0 - pow(cfg.beta2, t);
        for (e, g) in self.entries.iter_mut().zip(&grads.tensors) {
            let p = e.value.data_mut();
            for i in 0..g.len() {
                let m = cfg.beta1 * e.first_moment[i] + (1.0 - cfg.beta1) * g[i];
                let v = cfg.beta2 * e.second_moment[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                e.first_moment[i] = m;
                e.second_moment[i] = v;
                p[i] -= cfg.learning_rate * (m / c1) / (sqrt(v / c2) + cfg.epsilon);
            }
        }
        Ok(())
    }
}

/// Gradient buffers aligned with a [`ParameterStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn slot(&self, slot: usize) -> &[f64] {
        &self.tensors[slot]
    }

    pub fn slot_mut(&mut self, slot: usize) -> &mut [f64] {
        &mut self.tensors[slot]
    }

    /// Two distinct slots borrowed together; `a < b`.
    pub fn slot_pair_mut(&mut self, a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
        assert!(a < b, "slot_pair_mut needs a < b");
        let (lo, hi) = self.tensors.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn fill_zero(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.iter_mut().for_each(|v| *v = 0.0));
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors.iter_mut().for_each(|t| t.iter_mut().for_each(|v| *v *= s));
    }

    /// All values, slot order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// He-uniform initialization `U(-sqrt(6/fan_in), sqrt(6/fan_in))` drawn from
/// ChaCha stream `stream` of `seed`.
pub fn he_uniform(shape: &[usize], fan_in: usize, seed: u64, stream: u64) -> Tensor {
    scaled_he_uniform(shape, fan_in, 1.0, seed, stream)
}

/// [`he_uniform`] with the bound multiplied by `gain`.
pub fn scaled_he_uniform(shape: &[usize], fan_in: usize, gain: f64, seed: u64, stream: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let bound = gain * sqrt(6.0 / fan_in.max(1) as f64);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}
