//! File formats, run configuration and the `diffprobe` command-line tool
//! around [`diffprobe_core`].

pub mod cli;
pub mod config;
pub mod error;
pub mod io;

pub use diffprobe_core as core;
