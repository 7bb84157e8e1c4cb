//! Experiment harness, output formats and the artifact store for the
//! parametric hierarchical matrix library.

pub mod artifact;
pub mod config;
pub mod error;
pub mod harness;
pub mod output;

pub use error::{HarnessError, Result};
