//! Command-line front end: reads densities and configs, runs the solver, and
//! writes fields, reconstructions, samples, contours and previews.

pub mod app;
pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod output;
pub mod plot;

pub use error::{CliError, CliResult};
