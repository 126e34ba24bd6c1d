//! File formats, run driver and checks around `lmcl-core`.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod checks;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod oracle;
pub mod run;

pub use error::{LmclError, Result};
