//! Config-driven runner around the `crossdiff` library.

pub mod config;
pub mod execute;

pub use config::{load_config, parse_config, ConfigError, RunConfig, Scenario};
pub use execute::{execute, Check, ExecError, Manifest, Report};
