pub mod config;
pub mod error;
pub mod experiment;
pub mod selfcheck;
pub mod train;

pub use config::{LossKind, RunConfig};
pub use error::{CliError, CliResult};
