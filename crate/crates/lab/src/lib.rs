//! Experiment harness for `sane-core`: configuration files, dataset and
//! checkpoint formats, CSV/JSON artifacts, and the `sane-lab` command line.

pub mod config;
mod error;
pub mod formats;
pub mod records;
pub mod run;

pub use config::{Command, ExperimentConfig};
pub use error::{LabError, Result};
pub use run::{plan, run_command, Plan, RunOptions};
