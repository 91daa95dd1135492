//! File formats, configuration, parallel drivers, benchmarks and the
//! command line around `uanet-core`.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod parallel;
pub mod pipeline;
pub mod report;

pub use error::{AppError, Result};
