//! Reverse-mode automatic differentiation over dense matrices.
//!
//! [`Tensor`] is a row-major matrix generic over [`Scalar`] (`f32` or `f64`).
//! A [`Tape`] records primitives as they are evaluated and replays them in
//! reverse in [`Tape::backward`]. [`grad_check`] validates any scalar-valued
//! builder against central finite differences.

mod error;
mod gradcheck;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, ParamCheck};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Axis, Scalar, Tensor};
