//! Configuration parsing and the experiment pipeline behind the `pfedpt`
//! binary.

pub mod config;
pub mod pipeline;

pub use config::{parse_config, parse_config_str, ExperimentConfig};
pub use pipeline::{config_hash, run, sweep, RunOptions, RunSummary, SweepRow};
