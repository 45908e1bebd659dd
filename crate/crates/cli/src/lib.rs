//! Experiment driver behind the `lowflow` executable.
//!
//! Command-line flags are resolved into a [`job::Job`], which carries every
//! input needed to reproduce a run. The job is recorded in a
//! [`manifest::RunManifest`] before any computation, so `lowflow replay`
//! can rerun it later.

pub mod args;
pub mod error;
pub mod figure1;
pub mod job;
pub mod manifest;

pub use error::{exit_code, CliError};
pub use job::Job;
pub use manifest::RunManifest;
