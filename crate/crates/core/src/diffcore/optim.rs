use serde::{Deserialize, Serialize};

use super::{DiffError, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A trainable tensor together with its Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        let n = tensor.numel();
        Self {
            name: name.into(),
            tensor: tensor.with_requires_grad(),
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensor.grad = None;
    }
}

/// Ordered collection of the parameters of one model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.params.push(Parameter::new(name, tensor));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let t = &mut self.params[id.0].tensor;
        match &mut t.grad {
            Some(existing) => existing.iter_mut().zip(g).for_each(|(e, d)| *e += d),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Flattened copy of every gradient, in parameter order.
    pub fn flat_grads(&self) -> Option<Vec<f64>> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for p in &self.params {
            out.extend_from_slice(p.tensor.grad.as_deref()?);
        }
        Some(out)
    }
}

/// One bias-corrected Adam update over every parameter, followed by zeroing
/// the gradients.
pub fn adam_step(params: &mut ParamSet, lr: f64) -> Result<(), DiffError> {
    if let Some(p) = params.iter().find(|p| p.tensor.grad.is_none()) {
        return Err(DiffError::MissingGrad(p.name.clone()));
    }
    for p in params.iter_mut() {
        p.step += 1;
        let t = p.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let grad = p.tensor.grad.take().expect("checked above");
        let data = p.tensor.data_mut();
        for i in 0..data.len() {
            let g = grad[i];
            let m = ADAM_BETA1 * p.first_moment[i] + (1.0 - ADAM_BETA1) * g;
            let v = ADAM_BETA2 * p.second_moment[i] + (1.0 - ADAM_BETA2) * g * g;
            p.first_moment[i] = m;
            p.second_moment[i] = v;
            data[i] -= lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}
