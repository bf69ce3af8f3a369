//! Dense `f32` tensors with tape-based reverse-mode differentiation, the
//! transformer operator set, Adam, and binary checkpoints.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod optim;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{softmax_in_place, Graph, Var};
pub use optim::{Adam, AdamConfig, OptimizerState, StepOutcome};
pub use params::{Param, ParamGrads, ParamId, ParamStore};
pub use tensor::Tensor;
