//! Separable 3D Gaussian post-smoothing.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::volume::Volume;

/// Default smoothing width for reassembled volumes.
pub const DEFAULT_SIGMA: f64 = 1.075;

/// Sampled 1D Gaussian of radius `⌈4σ⌉`, normalized to sum 1.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        bail!(Config, "smoothing sigma must be positive, got {}", sigma);
    }
    let radius = libm::ceil(4.0 * sigma) as isize;
    let mut k: Vec<f64> = (-radius..=radius).map(|x| libm::exp(-((x * x) as f64) / (2.0 * sigma * sigma))).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    Ok(k)
}

/// Convolve along one axis; taps falling outside are dropped and the
/// remaining weights renormalized.
fn smooth_axis(data: &[f64], dims: [usize; 3], axis: usize, kernel: &[f64]) -> Vec<f64> {
    let radius = (kernel.len() / 2) as isize;
    let strides = [dims[1] * dims[2], dims[2], 1];
    let len = dims[axis] as isize;
    let stride = strides[axis];
    let mut out = vec![0.0; data.len()];
    for (flat, o) in out.iter_mut().enumerate() {
        let pos = ((flat / stride) % dims[axis]) as isize;
        let (mut acc, mut mass) = (0.0, 0.0);
        for (ki, &w) in kernel.iter().enumerate() {
            let p = pos + ki as isize - radius;
            if (0..len).contains(&p) {
                let src = (flat as isize + (p - pos) * stride as isize) as usize;
                acc += w * data[src];
                mass += w;
            }
        }
        *o = acc / mass;
    }
    out
}

/// 3D Gaussian smoothing with standard deviation `sigma` voxels.
pub fn gaussian_smooth(volume: &Volume, sigma: f64) -> Result<Volume> {
    let kernel = gaussian_kernel(sigma)?;
    let dims = volume.dims();
    let mut data: Vec<f64> = volume.voxels().iter().map(|&v| v as f64).collect();
    for axis in 0..3 {
        data = smooth_axis(&data, dims, axis, &kernel);
    }
    Volume::new(dims, data.into_iter().map(|v| v as f32).collect())
}

/// Smooth the whole volume but keep the result only where `region` is
/// nonzero; other voxels are copied unchanged.
pub fn gaussian_smooth_within(volume: &Volume, sigma: f64, region: &Volume) -> Result<Volume> {
    if region.dims() != volume.dims() {
        bail!(Shape, "region {:?} and volume {:?} differ", region.dims(), volume.dims());
    }
    let smoothed = gaussian_smooth(volume, sigma)?;
    let voxels = volume
        .voxels()
        .iter()
        .zip(smoothed.voxels())
        .zip(region.voxels())
        .map(|((&v, &s), &r)| if r != 0.0 { s } else { v })
        .collect();
    Volume::new(volume.dims(), voxels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_shape() {
        let k = gaussian_kernel(DEFAULT_SIGMA).unwrap();
        assert_eq!(k.len(), 2 * 5 + 1);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(k.windows(2).take(5).all(|w| w[0] < w[1]));
        assert!(gaussian_kernel(0.0).is_err());
        assert!(gaussian_kernel(f64::NAN).is_err());
    }

    #[test]
    fn constant_unchanged() {
        let v = Volume::new([5, 6, 7], vec![0.37; 210]).unwrap();
        let s = gaussian_smooth(&v, 1.075).unwrap();
        assert!(s.voxels().iter().all(|&x| (x - 0.37).abs() < 1e-6));
    }

    #[test]
    fn impulse_gives_kernel() {
        let n = 15;
        let mut vox = vec![0.0; n * n * n];
        vox[(7 * n + 7) * n + 7] = 1.0;
        let v = Volume::new([n, n, n], vox).unwrap();
        let s = gaussian_smooth(&v, 1.075).unwrap();
        let sig2 = 2.0 * 1.075f64 * 1.075;
        let norm: f64 = (-5..=5).map(|x: i32| (-(x * x) as f64 / sig2).exp()).sum();
        for (d, h, w) in [(7, 7, 7), (6, 7, 9), (3, 10, 12), (7, 2, 7)] {
            let (a, b, c) = (d as f64 - 7.0, h as f64 - 7.0, w as f64 - 7.0);
            let want = (-(a * a + b * b + c * c) / sig2).exp() / norm.powi(3);
            assert!((s.get(d, h, w) as f64 - want).abs() < 1e-7);
        }
    }

    #[test]
    fn within_region_only() {
        let vox: Vec<f32> = (0..64).map(|i| (i % 5) as f32).collect();
        let v = Volume::new([4, 4, 4], vox).unwrap();
        let mut region = vec![0.0; 64];
        region[21] = 1.0;
        let region = Volume::new([4, 4, 4], region).unwrap();
        let full = gaussian_smooth(&v, 1.0).unwrap();
        let part = gaussian_smooth_within(&v, 1.0, &region).unwrap();
        for i in 0..64 {
            let want = if i == 21 { full.voxels()[i] } else { v.voxels()[i] };
            assert_eq!(part.voxels()[i], want);
        }
    }
}
