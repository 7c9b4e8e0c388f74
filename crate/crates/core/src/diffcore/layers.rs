use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{ParamId, ParamSet};
use super::tape::{Tape, Var};
use super::{DiffError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// Fully connected layer `activation(x·W + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl Dense {
    /// Glorot-uniform weights, `U(−a, a)` with `a = sqrt(6 / (in + out))`, and
    /// zero bias.
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        init_seed: u64,
    ) -> Result<Self, DiffError> {
        if in_dim == 0 || out_dim == 0 {
            return Err(DiffError::Shape(format!("dense layer {in_dim}->{out_dim}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w: Vec<f64> = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-a..a))
            .collect();
        let weight = params.add(format!("{name}.weight"), Tensor::new(&[in_dim, out_dim], w)?);
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
            activation,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var, DiffError> {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        let h = tape.matmul(x, w)?;
        let h = tape.add(h, b)?;
        Ok(self.activation.apply(tape, h))
    }
}
