//! Reverse-mode automatic differentiation over dense tensors.

pub mod check;
pub mod ops;
mod tape;

pub use check::{grad_check, grad_check_params, GradCheckReport};
pub use ops::{apply_primitive, Primitive};
pub use tape::{backward, GradMap, Grads, Tape, Var};
