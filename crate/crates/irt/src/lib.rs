//! Dataset IO, checkpoints, training orchestration and the `irt` command
//! line on top of `irt-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod raster;
pub mod trainer;

pub use error::{IrtError, Result};
