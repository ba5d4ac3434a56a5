//! File formats, WAV ingestion, reports, plots and the command-line pipeline
//! around [`sonanza_core`].
//!
//! Output layout of each subcommand is described in the repository README.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod plot;
pub mod report;
pub mod selftest;
pub mod tensor_file;
pub mod wav;

pub use error::{Error, Result};
