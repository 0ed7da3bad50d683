//! Command-line driver: strict JSON experiment configs, result bundles
//! (CSV time series, JSON summaries) and canned figure reproductions.

pub mod bundle;
pub mod commands;
pub mod config;
mod error;

pub use error::CliError;
