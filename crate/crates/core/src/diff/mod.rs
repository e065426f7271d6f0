//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod eager;
mod exec;
pub mod kernels;
mod tape;
mod tensor;

pub use eager::Eager;
pub use exec::Exec;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod gradcheck;
