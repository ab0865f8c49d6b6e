//! Configuration, orchestration and artifact output for the `marcus-nls` binary.

pub mod commands;
pub mod config;
pub mod output;

pub use commands::Subcommand;
pub use config::{parse_config, parse_config_str, ConfigError, ExperimentConfig, Violation};
pub use output::ArtifactDir;
