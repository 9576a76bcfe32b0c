//! Experiment harness for the jcast toolkit: corpus synthesis, training,
//! decoding, scoring and resumable grid sweeps.

pub mod commands;
pub mod error;
pub mod spec;
pub mod sweep;

pub use error::{CliError, Result};
