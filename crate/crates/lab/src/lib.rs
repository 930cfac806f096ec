//! File formats, experiment pipelines and the command-line front end for
//! `tmle-lens-core`.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;
pub mod svg;

pub use config::RunConfig;
pub use error::{LabError, LabResult};
pub use pipeline::{run, Command};
