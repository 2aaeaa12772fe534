//! Whole-volume inpainting: select masked slices, sample each one,
//! reassemble and post-smooth.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diffusion::{sample_batch, Denoiser};
use crate::error::{bail, Result};
use crate::schedule::NoiseSchedule;
use crate::smooth::{gaussian_smooth, gaussian_smooth_within, DEFAULT_SIGMA};
use crate::tensor::Tensor;
use crate::volume::{nonzero_slices, reassemble, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Smoothing {
    Off,
    /// Smooth the whole reassembled volume.
    Volume { sigma: f64 },
    /// Smooth, but only overwrite voxels inside the mask.
    WithinMask { sigma: f64 },
}

impl Default for Smoothing {
    fn default() -> Self {
        Smoothing::Volume { sigma: DEFAULT_SIGMA }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InpaintOptions {
    /// Slice `i` samples with seed `seed + i`.
    pub seed: u64,
    /// Keep the baseline outside the mask instead of replacing whole slices.
    pub composite: bool,
    pub smoothing: Smoothing,
    /// Slices sampled together in one chain batch.
    pub batch_slices: usize,
}

impl Default for InpaintOptions {
    fn default() -> Self {
        Self { seed: 0, composite: false, smoothing: Smoothing::default(), batch_slices: 8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inpainted {
    pub volume: Volume,
    /// Axial indices that were sampled and replaced.
    pub replaced: Vec<usize>,
}

/// Inpaint every axial slice of `baseline` whose `mask` slice is non-empty.
/// Ground truth is never an input. With no masked slice the baseline is
/// returned unchanged and unsmoothed.
pub fn inpaint_volume<D: Denoiser + ?Sized>(
    model: &D,
    image_size: usize,
    schedule: &NoiseSchedule,
    baseline: &Volume,
    mask: &Volume,
    options: &InpaintOptions,
) -> Result<Inpainted> {
    let [_, h, w] = baseline.dims();
    if mask.dims() != baseline.dims() {
        bail!(Shape, "mask {:?} and baseline {:?} differ", mask.dims(), baseline.dims());
    }
    if h != image_size || w != image_size {
        bail!(Shape, "case slices are {}x{} but the model expects {}x{}", h, w, image_size, image_size);
    }
    if !mask.is_binary() {
        bail!(Domain, "mask is not binary");
    }
    let indices = nonzero_slices(mask);
    if indices.is_empty() {
        return Ok(Inpainted { volume: baseline.clone(), replaced: indices });
    }
    let plane = h * w;
    let chunk = options.batch_slices.max(1);
    let mut sampled: Vec<(usize, Vec<f32>)> = Vec::with_capacity(indices.len());
    for group in indices.chunks(chunk) {
        let gather = |v: &Volume| group.iter().flat_map(|&i| v.slice(i).iter().copied()).collect::<Vec<f32>>();
        let shape = [group.len(), 1, h, w];
        let b = Tensor::new(&shape, gather(baseline))?;
        let m = Tensor::new(&shape, gather(mask))?;
        let seeds: Vec<u64> = group.iter().map(|&i| options.seed.wrapping_add(i as u64)).collect();
        let x = sample_batch(model, &b, &m, schedule, &seeds)?;
        for (k, &i) in group.iter().enumerate() {
            let mut slice = x.data()[k * plane..(k + 1) * plane].to_vec();
            if options.composite {
                for ((s, &bv), &mv) in slice.iter_mut().zip(baseline.slice(i)).zip(mask.slice(i)) {
                    *s = mv * *s + (1.0 - mv) * bv;
                }
            }
            sampled.push((i, slice));
        }
    }
    let volume = reassemble(baseline, &sampled)?;
    let volume = match options.smoothing {
        Smoothing::Off => volume,
        Smoothing::Volume { sigma } => gaussian_smooth(&volume, sigma)?,
        Smoothing::WithinMask { sigma } => gaussian_smooth_within(&volume, sigma, mask)?,
    };
    Ok(Inpainted { volume, replaced: indices })
}
