//! Wasserstein auto-encoder laboratory.

pub mod diffcore;
pub mod datasets;
pub mod divergences;
pub mod models;
pub mod rng;
pub mod training;
pub mod eval;
pub mod experiments;
