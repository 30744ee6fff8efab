//! File formats, run configuration and the `crowdtrack` command line on top
//! of `crowdtrack-core`.

pub mod cli;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod formats;
pub mod render;

pub use config::RunConfig;
pub use error::{Error, Result};
