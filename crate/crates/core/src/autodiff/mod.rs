//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Computations are recorded on a [`Tape`] as they run; [`Tape::backward`]
//! sweeps the record once in reverse to produce parameter gradients.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use params::{clip_grad_norm, sgd_step, sgd_step_with, Adam, Grads, ParamSet, Velocity};
pub use tape::{log_sum_exp, CustomBackward, Elementwise, NodeGrads, Reduction, Tape, Var};
pub use tensor::Tensor;


#[cfg(test)]
mod tests;
