//! Dense tensors, a recorded reverse-mode tape, and finite-difference checking.
//!
//! All model arithmetic runs through [`Tape`]: each primitive stores its output
//! and enough of its inputs to replay the chain rule in reverse creation order.
//! Parameters live in a [`ParamStore`] and only receive gradients when a
//! backward pass is explicitly accumulated into it.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, traced, GradCheckReport};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{
    clamped_exp, sigmoid, softmax, Gradients, LinearOperator, Tape, Var, LOGIT_CLAMP,
};
pub use tensor::Tensor;
