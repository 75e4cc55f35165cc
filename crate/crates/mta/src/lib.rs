//! Files, runs and the command line around `mta-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod dump;
pub mod error;
pub mod harness;
pub mod plot;
pub mod report;

pub use error::{HarnessError, Result};
