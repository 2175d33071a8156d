//! Minimal dense-tensor core with reverse-mode gradients for the layers the
//! classifier and the mask optimizer need.

pub mod kernels;
mod optim;
mod scalar;
mod tape;
mod tensor;

pub use optim::{he_init, he_uniform_bound, sgd_step};
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
