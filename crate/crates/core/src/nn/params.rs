use std::collections::HashMap;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// How a parameter was initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(−b, b)` with `b = 1 / sqrt(fan_in)`, so the standard deviation is
    /// `1 / sqrt(3 · fan_in)`.
    KaimingUniform { fan_in: usize },
    Zeros,
    Ones,
}

impl Init {
    pub fn tag(&self) -> &'static str {
        match self {
            Init::KaimingUniform { .. } => "kaiming_uniform",
            Init::Zeros => "zeros",
            Init::Ones => "ones",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T: Real> {
    pub tensor: Tensor<T>,
    pub init: Init,
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone)]
pub struct ParameterStore<T: Real = f32> {
    entries: IndexMap<String, ParamEntry<T>>,
}

impl<T: Real> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> PartialEq for ParameterStore<T> {
    fn eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.tensor == b.tensor && a.init == b.init)
    }
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let tensor = match init {
            Init::Zeros => Tensor::zeros(shape.to_vec()),
            Init::Ones => Tensor::ones(shape.to_vec()),
            Init::KaimingUniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
                Tensor::from_vec(shape.to_vec(), data)?
            }
        };
        self.entries.insert(name, ParamEntry { tensor, init });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), &e.tensor))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, e)| (n.as_str(), &mut e.tensor))
    }

    /// Replaces a tensor with one of identical shape.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        if entry.tensor.shape() != tensor.shape() {
            return Err(Error::shape("set_param", entry.tensor.shape(), tensor.shape()));
        }
        entry.tensor = tensor;
        Ok(())
    }

    /// Fills a parameter with a constant.
    pub fn fill(&mut self, name: &str, value: f64) -> Result<()> {
        let shape = self
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?
            .shape()
            .to_vec();
        self.set(name, Tensor::full(shape, T::of(value)))
    }

    /// Sum of scalar counts over parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, e)| e.tensor.numel())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|(n, e)| {
                    (
                        n.clone(),
                        ParamEntry {
                            tensor: e.tensor.cast(),
                            init: e.init,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Adds every parameter to `g` as a named, grad-tracked leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(n, e)| (n.clone(), g.param(n.clone(), e.tensor.clone())))
                .collect(),
        }
    }

    /// Adds every parameter to `g` as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(n, e)| (n.clone(), g.constant(e.tensor.clone())))
                .collect(),
        }
    }
}

/// Parameter name → graph handle for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter `{name}` is not bound")))
    }

    /// Binds a single extra handle (tests and gradient checks).
    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }
}
