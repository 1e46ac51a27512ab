// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense matrices and tape-based reverse-mode differentiation.

pub(crate) mod matrix;
mod tape;

pub use matrix::{rmsnorm, Matrix};
pub use tape::{Gradients, Tape, Var};
