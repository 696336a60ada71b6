//! File formats, dataset pipeline and the `upit` command line on top of
//! [`upit_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod manifest;
pub mod maskio;
pub mod pipeline;
pub mod report;
pub mod wav;

pub use error::{CliError, Result};
