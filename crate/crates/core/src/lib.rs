//! Early-step cross-attention quality probing for diffusion generators.
//!
//! The crate is `no_std` (it needs `alloc`) and performs no IO; file and
//! process plumbing lives in the `diffprobe` companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod cost;
pub mod data;
pub mod error;
pub mod eval;
pub mod format;
pub mod nn;
pub mod probe;
pub mod rng;
pub mod stats;
pub mod testbed;
pub mod workflows;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
