//! Dense f64 tensors, a tape-based reverse-mode autodiff graph and Adam.

mod adam;
mod gemm;
mod graph;
mod pool;
mod tensor;

pub use adam::{adam_step, cosine_decay, AdamState};
pub use graph::{Graph, Var};
pub use tensor::{Result, Tensor, TensorError};
