//! File formats, experiment orchestration and the command-line front end
//! for the `vssl-core` library.

pub mod audio;
pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod corpus;
pub mod error;
pub mod features;
pub mod fsio;
pub mod manifest;
pub mod pipeline;
pub mod plot;
pub mod report;
pub mod video;

pub use error::{Error, Result};
