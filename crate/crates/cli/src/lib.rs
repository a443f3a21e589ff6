//! Command implementations behind the `admt` binary. Each command is also a
//! plain function so runs can be driven in-process.

pub mod ablate;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod generate;
pub mod train;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
