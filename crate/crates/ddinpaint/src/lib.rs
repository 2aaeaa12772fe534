//! File formats, checkpoints on disk and the command-line driver for
//! [`ddinpaint_core`].
//!
//! Volumes are read and written as VVOL (a small little-endian container)
//! or single-file NIfTI-1 `float32`. Checkpoints are a JSON header
//! followed by raw `f32` sections.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod nifti;
pub mod volume_io;
pub mod vvol;

pub use error::{Error, Result};
