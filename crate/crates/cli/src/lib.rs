//! Command-line plumbing for synthdistill: config files, checkpoints, metrics
//! streams and the train / eval / ablate / gradcheck commands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod metrics;

pub use checkpoint::Checkpoint;
pub use config::RunConfigFile;
pub use error::CliError;
