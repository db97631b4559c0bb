//! Cardinality-constrained training of small neural networks with surrogate
//! Lagrangian relaxation, an ADMM baseline, and pruning utilities.

pub mod admm;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod models;
pub mod objective;
pub mod optim;
pub mod prune;
pub mod rng;
pub mod slr;
pub mod sparsity;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{LayerSet, Tensor};
