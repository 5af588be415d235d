//! Experiment runner, file formats and command line for `fedsis-core`.

// See the matching note in `fedsis-core`.
#![allow(clippy::unnecessary_cast, clippy::neg_cmp_op_on_partial_ord)]

pub mod codec;
pub mod concurrent;
pub mod config;
pub mod dataset;
pub mod error;
pub mod runner;
pub mod sweep;

pub use config::ExperimentConfig;
pub use error::{LabError, Result};
