//! Std side of malign: file formats (IDX, CSV, checkpoints, perturbation
//! sets, reports), the experiment harness and runner, and the CLI.

pub mod checkpoint;
pub mod cli;
mod container;
pub mod csvdata;
pub mod error;
pub mod harness;
pub mod idx;
pub mod manifest;
pub mod perturbation;
pub mod report;
pub mod runner;
pub mod source;

pub use error::{Error, Result};
pub use malign_core;
