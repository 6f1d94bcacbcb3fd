//! Named parameter storage with gradient accumulators.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use super::scalar::Scalar;
use crate::error::{DmError, Result};
use crate::rngutil;

#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
    pub grad: Vec<T>,
}

/// Parameters keyed by hierarchical names ("encoder.l0.attn.wq", ...).
/// BTreeMap keeps every iteration order deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, rows: usize, cols: usize, data: Vec<T>) {
        assert_eq!(data.len(), rows * cols, "param {name} data length");
        assert!(
            !self.params.contains_key(name),
            "duplicate parameter name {name}"
        );
        let grad = vec![T::zero(); data.len()];
        self.params.insert(name.to_string(), Param { rows, cols, data, grad });
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| DmError::UnknownParam(name.to_string()))
    }

    pub fn set_data(&mut self, name: &str, data: Vec<T>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| DmError::UnknownParam(name.to_string()))?;
        if data.len() != p.data.len() {
            return Err(DmError::Config(format!(
                "set_data {name}: length {} != {}",
                data.len(),
                p.data.len()
            )));
        }
        p.data = data;
        Ok(())
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &[T]) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| DmError::UnknownParam(name.to_string()))?;
        if g.len() != p.grad.len() {
            return Err(DmError::Shape {
                op: "accumulate_grad",
                lhs: (p.rows, p.cols),
                rhs: (1, g.len()),
            });
        }
        for (dst, &src) in p.grad.iter_mut().zip(g) {
            *dst += src;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    /// Simple data checksum used by isolation tests.
    pub fn checksum(&self, prefix: &str) -> f64 {
        let mut acc = 0.0;
        for (name, p) in self.iter() {
            if name.starts_with(prefix) {
                for (i, v) in p.data.iter().enumerate() {
                    acc += v.to_f64() * ((i % 97) as f64 + 1.0);
                }
            }
        }
        acc
    }

    // ---- initializers --------------------------------------------------

    /// Xavier-uniform weight matrix (fan_in x fan_out).
    pub fn insert_xavier(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data: Vec<T> = (0..fan_in * fan_out)
            .map(|_| T::from_f64(rngutil::uniform(rng, -limit, limit)))
            .collect();
        self.insert(name, fan_in, fan_out, data);
    }

    pub fn insert_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, rows, cols, vec![T::zero(); rows * cols]);
    }

    pub fn insert_ones(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, rows, cols, vec![T::one(); rows * cols]);
    }

    /// N(0, std) embedding-style initialization.
    pub fn insert_normal(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) {
        let data: Vec<T> = (0..rows * cols)
            .map(|_| T::from_f64(rngutil::randn(rng) * std))
            .collect();
        self.insert(name, rows, cols, data);
    }

    /// Convert the whole store to another scalar type (f32 <-> f64),
    /// used to run gradient checks in 64-bit mode.
    pub fn convert<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, p) in self.iter() {
            out.insert(
                name,
                p.rows,
                p.cols,
                p.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            );
        }
        out
    }
}
