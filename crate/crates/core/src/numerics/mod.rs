//! Minimal differentiable tensor core: kernels, tape-based reverse mode,
//! AdamW and a finite-difference gradient checker.

mod autograd;
mod gradcheck;
pub mod kernels;
pub mod ops;
mod optim;
mod tensor;

pub use autograd::{BackwardFn, Gradients, Tape, Var};
pub use gradcheck::{grad_check, grad_check_sampled, ScalarFn};
pub use kernels::ConvSpec;
pub use optim::{AdamWConfig, AdamWState};
pub use tensor::Tensor;
