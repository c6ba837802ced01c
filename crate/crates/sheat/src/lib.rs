//! Command-line laboratory for the stochastic heat equation on [0,1].
//!
//! The numerics live in `sheat-core`; this crate adds what needs `std`:
//! TOML experiment configs, parallel ensembles, λ sweeps with resumption,
//! CSV/JSON result bundles and their checksummed manifests.

pub mod commands;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod manifest;
pub mod output;
pub mod sweep;

pub use commands::{execute, Command, RunContext};
pub use config::ExperimentConfig;
pub use error::{RunError, RunResult};
