pub mod conditioning;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod flowcore;
pub mod linalg;
pub mod losses;
pub mod netopt;
pub mod rng;
pub mod schedules;
pub mod trainer;

pub use error::{Error, Result};
