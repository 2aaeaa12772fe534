use ddinpaint_core::smooth::{gaussian_smooth, DEFAULT_SIGMA};
use ddinpaint_core::volume::Volume;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct 3D convolution with the truncated Gaussian, weights renormalized
/// over the taps that fall inside the volume.
fn brute_force(v: &Volume, sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil() as isize;
    let [d, h, w] = v.dims();
    let mut out = Vec::with_capacity(v.len());
    for z in 0..d as isize {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (mut acc, mut mass) = (0.0f64, 0.0f64);
                for dz in -r..=r {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (zz, yy, xx) = (z + dz, y + dy, x + dx);
                            if zz < 0 || yy < 0 || xx < 0 || zz >= d as isize || yy >= h as isize || xx >= w as isize {
                                continue;
                            }
                            let wt = (-((dz * dz + dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
                            acc += wt * v.get(zz as usize, yy as usize, xx as usize) as f64;
                            mass += wt;
                        }
                    }
                }
                out.push(acc / mass);
            }
        }
    }
    out
}

#[test]
fn matches_brute_force_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let v = Volume::new([16, 16, 16], (0..4096).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let fast = gaussian_smooth(&v, DEFAULT_SIGMA).unwrap();
    let slow = brute_force(&v, DEFAULT_SIGMA);
    let worst = fast.voxels().iter().zip(&slow).map(|(&a, &b)| (a as f64 - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-5, "max deviation {worst}");
}

/// Σ over adjacent axial slices of squared differences.
fn slice_energy(v: &Volume) -> f64 {
    let [d, _, _] = v.dims();
    (1..d)
        .map(|z| v.slice(z).iter().zip(v.slice(z - 1)).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>())
        .sum()
}

#[test]
fn slice_artifacts_are_reduced() {
    let [d, h, w] = [12, 20, 20];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let offsets: Vec<f32> = (0..d).map(|_| rng.random_range(-0.15..0.15)).collect();
    let mut vox = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let smooth = 0.5 + 0.3 * ((y as f32) / 5.0).sin() * ((x as f32) / 7.0).cos() + 0.01 * z as f32;
                vox.push(smooth + offsets[z]);
            }
        }
    }
    let v = Volume::new([d, h, w], vox).unwrap();
    let before = slice_energy(&v);
    let after = slice_energy(&gaussian_smooth(&v, DEFAULT_SIGMA).unwrap());
    assert!(after < before, "{before} -> {after}");
}
