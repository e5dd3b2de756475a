//! File formats, configuration, reports and experiment plumbing around
//! `bnta-core`: checkpoints, PPM datasets with JSON manifests, the TOML run
//! configuration, CSV/JSON/text reports, the ablation sweeps and the
//! `bnta` command-line tool.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;
pub mod manifest;
pub mod ppm;
pub mod report;

pub use error::{Error, Result};

/// Version echoed into every artifact.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
