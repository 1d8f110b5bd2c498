//! Dense tensors, a recorded computation graph with reverse-mode differentiation, the Adam
//! optimizer, and the raw checkpoint format used by the DTN forgery detector.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod ops;
pub mod optim;
mod params;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use ops::{sigmoid, BatchStats, BnMode};
pub use optim::{AdamConfig, AdamState, StepLr};
pub use params::{BoundParams, ModelParams};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
