//! Reverse-mode automatic differentiation over dense `f64` tensors, plus the
//! dense layer and Adam optimizer every model in the crate is built from.

mod gemm;
pub mod layers;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use layers::{Activation, Dense};
pub use optim::{adam_step, ParamId, ParamSet, Parameter};
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backward needs a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("op expects {expected} inputs, got {got}")]
    Arity { expected: usize, got: usize },
}
