//! Training loops, ablation grids, reports and file formats around `uet-core`.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod report;
pub mod runner;

pub use error::{HarnessError, Result};
