//! Batch front end for sdaf: TOML configs, field archives, JSON reports
//! and CSV exports.

pub mod archive;
pub mod config;
pub mod error;
pub mod export;
pub mod runner;

pub use archive::{FieldArchive, FORMAT};
pub use config::{Experiment, ExperimentConfig};
pub use error::{ArchiveError, CliError};
pub use runner::{run, run_config, RunOptions, RunOutcome, RunReport};
