//! Minimal reverse-mode differentiation: tensors, a recording tape with
//! hand-written backward passes, named parameters, gradient checking and Adam.

mod adam;
pub mod checkpoint;
mod gradcheck;
pub mod ops;
mod params;
mod real;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig};
pub use gradcheck::{gradcheck, gradcheck_with, Coverage, DEFAULT_STEP};
pub use params::{ParamEntry, ParamStore};
pub use real::Real;
pub use tape::{BackwardCtx, Gradients, Op, Tape, Var};
pub use tensor::Tensor;
