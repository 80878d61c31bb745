pub mod commands;
pub mod config;
pub mod error;
pub mod heatmap;
pub mod probe;
pub mod viz;

pub use error::CliError;
