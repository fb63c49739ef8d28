//! Files, parallel execution and the command-line driver for the federated
//! semi-supervised segmentation simulator in [`fgasl_core`].

pub mod cli;
mod error;
pub mod exec;
pub mod plot;
pub mod report;
pub mod results;
pub mod stats;
pub mod store;

pub use error::{Error, Result};
pub use fgasl_core as core;
