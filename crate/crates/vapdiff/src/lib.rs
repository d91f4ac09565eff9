//! Dataset IO, description plumbing, checkpoints, the training and sampling
//! engine, and the `vapdiff` command line built on `vapdiff-core`.

pub mod bankfile;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod describe;
pub mod engine;
pub mod error;
pub mod http;
pub mod report;

pub use error::{Error, Result};
