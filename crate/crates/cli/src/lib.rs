//! Command-line pipeline: corpus generation, training, decoding and
//! evaluation driven by a single TOML run configuration.

pub mod config;
pub mod pipeline;
pub mod report;

pub use config::{Overrides, RunConfig};
