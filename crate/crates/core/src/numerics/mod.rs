//! Dense tensors, recorded forward passes with reverse-mode gradients, and
//! a finite-difference gradient checker.

mod gradcheck;
pub mod init;
mod params;
mod tensor;
mod trace;

pub use gradcheck::grad_check;
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
pub use trace::{Gradients, Trace, Var};

/// Epsilon added to the variance in every layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;
