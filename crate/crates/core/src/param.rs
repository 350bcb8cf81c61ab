use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Shape, Tensor};

/// A named, optionally frozen model weight.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Parameter {
            name: name.into(),
            tensor,
            trainable: true,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Shape) -> Self {
        Parameter::new(name, Tensor::zeros(shape))
    }

    /// He-normal initialisation: variance `2 / fan_in`.
    pub fn he_normal<R: Rng>(name: impl Into<String>, shape: Shape, fan_in: usize, rng: &mut R) -> Self {
        Parameter::normal(name, shape, (2.0 / fan_in as f64).sqrt(), rng)
    }

    pub fn normal<R: Rng>(name: impl Into<String>, shape: Shape, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        let values = (0..shape.numel()).map(|_| dist.sample(rng)).collect();
        Parameter::new(name, Tensor::from_vec(shape, values).expect("sized"))
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }
}
