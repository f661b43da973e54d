//! Command-line front end and HTTP service for `cbx-core`.

pub mod api;
pub mod commands;
pub mod error;
pub mod session;

pub use commands::{run, Cli};
pub use error::CliError;
