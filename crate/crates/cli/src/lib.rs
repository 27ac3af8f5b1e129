//! Operator surface for gnsp-core: configuration, experiment commands, CSV and
//! SVG output, and the built-in self-test.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod outputs;
pub mod plot;
pub mod selftest;

pub use config::RunConfig;
pub use error::CliError;
