// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::string::String;

/// Errors produced by the editing laboratory core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("shape error: {0}")]
    Shape(String),

    /// A caller violated an operation's preconditions.
    #[error("contract error: {0}")]
    Contract(String),

    /// A token id lies outside the model vocabulary.
    #[error("token id {id} outside vocabulary of size {vocab}")]
    Vocab { id: u32, vocab: usize },

    /// Normalisation of an all-zero vector with zero epsilon.
    #[error("division by zero: {0}")]
    DivisionByZero(String),

    /// Pretraining did not reach the requested accuracy.
    #[error("training failed to converge: accuracy {accuracy:.4} after {epochs} epochs")]
    TrainingFailure { accuracy: f64, epochs: usize },

    /// Random draw impossible (empty candidate pool).
    #[error("sampling error: {0}")]
    Sampling(String),

    /// Synthetic data generation infeasible for the requested parameters.
    #[error("generation error: {0}")]
    Generation(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! contract {
    ($($arg:tt)*) => {
        $crate::error::Error::Contract(alloc::format!($($arg)*))
    };
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(alloc::format!($($arg)*))
    };
}

pub(crate) use contract;
pub(crate) use shape_err;
