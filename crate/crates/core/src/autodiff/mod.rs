//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records each operation as it is evaluated. The op set is
//! closed: exactly what the Transformer and the two training losses need.
//! Shapes are validated eagerly, so a malformed call fails at the op that
//! caused it rather than during the backward sweep.

mod check;
mod graph;
pub mod kernels;
mod tensor;

pub use check::{
    finite_difference_check, finite_difference_check_with, finite_difference_probes, Probe, TensorMap,
    DEFAULT_COORDS_PER_TENSOR,
};
pub use graph::{Gradients, Graph, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
