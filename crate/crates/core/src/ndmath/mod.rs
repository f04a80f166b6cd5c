//! Dense tensors, reverse-mode autodiff, and Adam.

mod adam;
mod finite_diff;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use finite_diff::{finite_difference_grad, relative_error};
pub use params::Params;
pub use scalar::{lit, Scalar};
pub use tape::{conv_output_size, pool_output_size, Gradients, Tape, Var};
pub use tensor::Tensor;
