use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng;

/// How a store was initialized; stored with checkpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitRecord {
    pub scheme: String,
    pub seed: u64,
}

/// Named parameter tensors, kept sorted by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
    pub init: InitRecord,
}

/// Initialization scheme for one tensor.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanInUniform { fan_in: usize },
    /// `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, for weights feeding a ReLU.
    HeUniform { fan_in: usize },
    Zeros,
    Ones,
}

impl<T: Real> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            tensors: BTreeMap::new(),
            init: InitRecord { scheme: "he-uniform-hidden/fan-in-uniform-output/zero-bias".into(), seed },
        }
    }

    /// Add a freshly initialized tensor. Each tensor draws from its own stream
    /// keyed by name, so adding parameters never perturbs existing ones.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<()> {
        if self.tensors.contains_key(name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter name {name}")));
        }
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::from_fn(shape, |_| T::one()),
            Init::FanInUniform { fan_in } | Init::HeUniform { fan_in } => {
                let gain = if matches!(init, Init::HeUniform { .. }) { 6.0 } else { 1.0 };
                let bound = (gain / fan_in.max(1) as f64).sqrt();
                let mut r = rng::stream(self.init.seed, name, 0);
                Tensor::from_fn(shape, |_| T::from_f64c(r.gen_range(-bound..bound)))
            }
        };
        self.tensors.insert(name.to_string(), t);
        Ok(())
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) {
        self.tensors.insert(name.to_string(), t);
    }

    /// Add `U(-scale, scale)` noise to every tensor whose name passes `select`.
    pub fn jitter(&mut self, scale: f64, seed: u64, select: impl Fn(&str) -> bool) {
        for (name, t) in self.tensors.iter_mut().filter(|(n, _)| select(n)) {
            let mut r = rng::stream(seed, name, 1);
            for v in &mut t.data {
                *v = *v + T::from_f64c(r.gen_range(-scale..scale));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
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

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            init: self.init.clone(),
        }
    }

    /// Bitwise equality of every tensor.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.shape == b.shape
                    && a.data.iter().zip(&b.data).all(|(x, y)| x.to_f64c().to_bits() == y.to_f64c().to_bits())
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_reproducible_and_bounded() {
        let mut a = ParamStore::<f32>::new(7);
        let mut b = ParamStore::<f32>::new(7);
        for s in [&mut a, &mut b] {
            s.add("l.weight", &[4, 9], Init::FanInUniform { fan_in: 9 }).unwrap();
            s.add("l.bias", &[4], Init::Zeros).unwrap();
        }
        assert!(a.bitwise_eq(&b));
        let w = a.get("l.weight").unwrap();
        assert!(w.data.iter().all(|v| v.abs() <= 1.0 / 3.0));
        assert!(a.get("l.bias").unwrap().data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f64>::new(0);
        s.add("x", &[1], Init::Zeros).unwrap();
        assert!(s.add("x", &[1], Init::Zeros).is_err());
    }
}
