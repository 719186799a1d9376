//! File formats, dataset IO and the `crossview` command-line front-end for
//! [`crossview_core`].
//!
//! - [`tnsr`]: `CVTN` tensor blobs.
//! - [`checkpoint`]: `CVCK` model checkpoints.
//! - [`dataset`]: synthetic dataset directories.
//! - [`config`]: flat `key = value` run configuration.
//! - [`parallel`]: thread-pool fan-out.
//! - [`cli`]: subcommands and exit-code mapping.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod parallel;
pub mod tnsr;

pub use error::{Error, Result};
