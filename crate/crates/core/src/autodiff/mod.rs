//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records each primitive as it is applied; [`Tape::backward`]
//! sweeps the record in reverse and returns gradients for every leaf that
//! was registered as a parameter slot.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, relative_error, GradCheckReport, RELATIVE_ERROR_FLOOR};
pub use tape::{Axis, Gradients, Tape, Var};
pub use tensor::Tensor;
