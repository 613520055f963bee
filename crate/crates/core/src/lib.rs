#![no_std]
extern crate alloc;

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod math;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod params;
pub mod pretext;
pub mod rng;
pub mod signal;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
