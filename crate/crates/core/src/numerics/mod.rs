//! Dense `f64` tensors, a tape for reverse-mode differentiation, and AdamW.

mod adamw;
mod graph;
mod params;
mod tensor;

pub use adamw::{adamw_step, AdamWConfig, OptimizerState};
pub use graph::{FloatWidth, Gradients, Graph, Var};
pub use params::{GradBuffer, ParamId, Parameter, ParameterStore};
pub use tensor::Tensor;
