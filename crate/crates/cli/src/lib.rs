//! Experiment driver for the quantization lab: corpus generation,
//! quantizer sweeps, ablations and full pipeline runs with CSV/JSON
//! outputs.

pub mod ablation;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod output;
pub mod report;
pub mod run;
pub mod sweep;

pub use config::{RunConfig, RunManifest, RUN_SCHEMA, VERSION};
pub use error::{CliError, Result};
pub use run::{cmd_run, execute, RunDocument};
