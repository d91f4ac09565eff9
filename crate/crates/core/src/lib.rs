//! Core of an attribute-prompted, prototype-stabilized conditional diffusion model.
//!
//! Everything in this crate is pure computation over in-memory buffers and
//! works under `no_std` with `alloc`. File formats, the command line, HTTP
//! clients and run orchestration live in the `vapdiff` companion crate.
#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod autograd;
pub mod bank;
pub mod classifier;
pub mod codec;
pub mod denoiser;
mod error;
pub mod linalg;
pub mod math;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pcm;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod toy;
pub mod train;
pub mod vaps;

pub use error::{Error, Result};
pub use tensor::{Image, LatentTensor};
