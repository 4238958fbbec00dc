//! Experiment harness: configuration, cached training, rollout evaluation,
//! benchmarks and reports on top of `tfdp-core`.

pub mod bench;
pub mod cli;
pub mod error;
pub mod experiment;
pub mod render;
pub mod report;

pub use error::{HarnessError, Result};
