// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer-wise scalable adapter editing driven by causal tracing, on a
//! from-scratch micro decoder-only transformer.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the command
//! line and everything else touching the operating system live in the
//! companion `medlasa-lab` crate.
//!
//! Module map:
//!
//! - [`numerics`]: matrices and reverse-mode autodiff
//! - [`model`]: the transformer with capture / patch / freeze hooks
//! - [`tracing`]: clean, corrupted and restored runs producing impact matrices
//! - [`scaling`]: impact profiles to per-layer `(alpha, rank)` scale sets
//! - [`adapters`]: low-rank adapters on any subset of the seven projections
//! - [`editing`]: base pretraining and single-edit adapter training
//! - [`evaluation`]: efficacy, generality, locality, fluency and the average
//! - [`benchkit`]: synthetic knowledge graph and edit benchmark generation
#![no_std]

extern crate alloc;

pub mod adapters;
pub mod benchkit;
pub mod editing;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod scaling;
pub mod tracing;

pub use error::{Error, Result};
