// SPDX-License-Identifier: MIT OR Apache-2.0

//! File formats, experiment configuration and pipeline stages around
//! `medlasa-core`.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod formats;
pub mod heatmap;
pub mod io;
pub mod pipeline;

pub use config::ExperimentConfig;
pub use error::{LabError, Result};
