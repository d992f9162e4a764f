//! Experiment runner around `csid-core`: JSON configs with preset overlays,
//! run directories with persisted artifacts, and the comparison reporter.
//! Everything stochastic is seeded; a run directory is a pure function of
//! (config, seed) except for wall-time fields in `meta.json`.

pub mod config;
pub mod error;
pub mod experiment;
pub mod plots;
pub mod rundir;
pub mod table;

pub use error::{LabError, Result};
