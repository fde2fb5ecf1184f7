use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// How a parameter is initialized.
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    KaimingUniform { fan_in: usize },
    /// Uniform in `±bound`.
    Uniform { bound: f64 },
    Normal { std: f64 },
    Zeros,
    Ones,
    /// Explicit values, cycled if shorter than the tensor.
    Values(Vec<f64>),
}

/// A named learnable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub init: Init,
}

/// Owns every parameter of a model. Names are unique.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name:?}")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<T> = match &init {
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / (*fan_in).max(1) as f64).sqrt();
                (0..n).map(|_| T::of(self.rng.random_range(-bound..bound))).collect()
            }
            Init::Uniform { bound } => (0..n)
                .map(|_| {
                    if *bound > 0.0 {
                        T::of(self.rng.random_range(-bound..*bound))
                    } else {
                        T::zero()
                    }
                })
                .collect(),
            Init::Normal { std } => {
                let dist = Normal::new(0.0, *std)
                    .map_err(|e| Error::InvalidArgument(format!("normal init: {e}")))?;
                (0..n).map(|_| T::of(dist.sample(&mut self.rng))).collect()
            }
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Values(v) => {
                if v.is_empty() {
                    return Err(Error::InvalidArgument("empty init values".into()));
                }
                (0..n).map(|i| T::of(v[i % v.len()])).collect()
            }
        };
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.clone(),
            value: Tensor::new(shape, data)?,
            grad: Tensor::zeros(shape),
            init,
        });
        self.index.insert(name, id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Scalars in parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_value", format!("{:?}", p.value.shape()), format!("{:?}", value.shape())));
        }
        p.value = value;
        Ok(())
    }

    /// Same parameters in another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    init: p.init.clone(),
                })
                .collect(),
            index: self.index.clone(),
            rng: self.rng.clone(),
        }
    }
}
