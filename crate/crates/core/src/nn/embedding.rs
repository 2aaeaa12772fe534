use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Sinusoidal embedding of an integer timestep.
///
/// The first `dim/2` entries are `sin(t·ω_k)`, the last `dim/2` are
/// `cos(t·ω_k)`, with `ω_k = max_period^(-2k/dim)`.
pub fn timestep_embedding(t: usize, dim: usize, max_period: f64) -> Result<Tensor> {
    let data = embedding_row(t, dim, max_period)?;
    Tensor::new(&[dim], data)
}

/// Embeddings for a batch of timesteps, shape `[N, dim]`.
pub fn timestep_embedding_batch(ts: &[usize], dim: usize, max_period: f64) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(embedding_row(t, dim, max_period)?);
    }
    Tensor::new(&[ts.len(), dim], data)
}

fn embedding_row(t: usize, dim: usize, max_period: f64) -> Result<Vec<f32>> {
    if dim == 0 || dim % 2 != 0 {
        bail!(Config, "time embedding dimension must be even and positive, got {}", dim);
    }
    if max_period <= 0.0 {
        bail!(Config, "max_period must be positive");
    }
    let half = dim / 2;
    let mut row = Vec::with_capacity(dim);
    let args: Vec<f64> = (0..half)
        .map(|k| t as f64 * libm::pow(max_period, -2.0 * k as f64 / dim as f64))
        .collect();
    row.extend(args.iter().map(|&a| libm::sin(a) as f32));
    row.extend(args.iter().map(|&a| libm::cos(a) as f32));
    Ok(row)
}
