//! Minimal dense-tensor arithmetic with reverse-mode automatic
//! differentiation: just enough substrate for the model's layers, at a
//! construction-time-selectable precision (`f64` for testing, `f32` for
//! training).

pub mod gradcheck;
mod real;
mod tape;
mod tensor;

pub use real::Real;
pub use tape::{Tape, Unary};
pub use tensor::Tensor;
