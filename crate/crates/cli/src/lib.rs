//! Configuration-driven experiment runner for `riskmpc`.

pub mod config;
pub mod experiment;
pub mod oracle;

pub use config::{parse_config, ConfigError, ExperimentConfig, Overrides, PolicySpec};
pub use experiment::{run_experiment, RunError, RunReport};
pub use oracle::{oracle_check, OracleRow};
