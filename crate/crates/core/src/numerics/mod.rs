//! Minimal dense-tensor kernel: forward operations with hand-written
//! reverse-mode backward passes, an Adam optimizer, and a finite-difference
//! gradient checker. Everything runs on 64-bit floats, single-threaded per
//! tape; distinct tapes are independent.

mod adam;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};
pub use params::{BoundParams, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[allow(unused_imports)]
pub(crate) use tape::sigmoid_scalar;
