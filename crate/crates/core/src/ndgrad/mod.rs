//! Dense `f64` tensors, a reverse-mode gradient tape, optimizers and the
//! parameter checkpoint format.

pub mod checkpoint;
mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{Graph, Mask, Var};
pub use optim::{OptimizerKind, OptimizerState, Schedule};
pub use params::{Bound, ParamSet};
pub use tensor::Tensor;
