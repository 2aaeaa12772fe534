//! Slice-wise conditional denoising-diffusion inpainting for 3D volumes.
//!
//! The crate is `no_std` with `alloc`; the `std` feature (on by default)
//! only enables runtime SIMD detection in the matrix kernels. File formats,
//! checkpoints on disk and the command-line driver live in the `ddinpaint`
//! companion crate.
//!
//! Layout:
//!
//! - [`tensor`], [`nn`]: dense `f32` arrays, a reverse-mode tape and the
//!   layer primitives needed by the denoiser.
//! - [`unet`]: the conditional noise-prediction network.
//! - [`schedule`], [`diffusion`]: noise tables, forward noising, the
//!   training objective and the ancestral sampling chain.
//! - [`optim`], [`trainer`]: Adam, parameter EMA and the training loop.
//! - [`volume`], [`smooth`], [`phantom`], [`pipeline`]: volume handling,
//!   post-smoothing, synthetic cases and the per-case inpainting driver.
//! - [`metrics`]: masked SSIM / PSNR / MSE and report rendering.
#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod phantom;
pub mod pipeline;
pub mod schedule;
pub mod smooth;
pub mod tensor;
pub mod trainer;
pub mod unet;
pub mod volume;

mod gemm;
mod stats;

pub use error::{Error, Result};
pub use tensor::Tensor;
