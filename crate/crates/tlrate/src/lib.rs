//! File formats, run configuration, sweeps and reports on top of
//! [`tlrate_core`].

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod ledger;
pub mod report;
pub mod sweep;
pub mod tensor_io;

pub use config::RunConfig;
pub use error::{Error, Result};
