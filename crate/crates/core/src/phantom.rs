//! Synthetic head-like phantoms with spherical inpainting masks.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::volume::{preprocess, MaskedCase, Volume};

const PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub seed: u64,
    /// `[D, H, W]`.
    pub dims: [usize; 3],
    /// Nested ellipsoids inside the brain.
    pub structures: usize,
    pub mask_count: usize,
    /// Sphere radius range in voxels, inclusive.
    pub mask_radius: [f64; 2],
    /// Standard deviation of the additive voxel noise before preprocessing.
    pub noise: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self { seed: 0, dims: [16, 32, 32], structures: 4, mask_count: 1, mask_radius: [2.0, 4.0], noise: 0.01 }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 4) {
            bail!(Config, "phantom dims must be at least 4 per axis, got {:?}", self.dims);
        }
        let [lo, hi] = self.mask_radius;
        if !(lo >= 1.0 && hi >= lo && hi.is_finite()) {
            bail!(Config, "mask radius range must satisfy 1 <= min <= max, got [{}, {}]", lo, hi);
        }
        if self.mask_count == 0 {
            bail!(Config, "mask_count must be positive");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            bail!(Config, "noise must be non-negative");
        }
        Ok(())
    }

    /// Largest possible mask volume fraction (disjoint spheres at the
    /// maximum radius).
    pub fn max_mask_fraction(&self) -> f64 {
        let r = self.mask_radius[1];
        let sphere = 4.0 / 3.0 * core::f64::consts::PI * (r + 1.0) * (r + 1.0) * (r + 1.0);
        (self.mask_count as f64 * sphere / self.dims.iter().product::<usize>() as f64).min(1.0)
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
}

impl Ellipsoid {
    /// Normalized squared radius; below 1 inside.
    fn rho2(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| sq((p[a] - self.center[a]) / self.axes[a])).sum()
    }
}

fn sq(v: f64) -> f64 {
    v * v
}

fn smoothstep_inside(rho2: f64, softness: f64) -> f64 {
    let r = libm::sqrt(rho2);
    1.0 / (1.0 + libm::exp((r - 1.0) / softness))
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo { rng.random_range(lo..hi) } else { lo }
}

/// Generate a preprocessed ground truth, its mask and the voided baseline.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<MaskedCase> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [d, h, w] = spec.dims;
    let center = |n: usize| (n as f64 - 1.0) / 2.0;
    let brain = Ellipsoid {
        center: [center(d), center(h) + uniform(&mut rng, -1.0, 1.0), center(w) + uniform(&mut rng, -1.0, 1.0)],
        axes: [
            d as f64 * uniform(&mut rng, 0.40, 0.46),
            h as f64 * uniform(&mut rng, 0.38, 0.44),
            w as f64 * uniform(&mut rng, 0.34, 0.42),
        ],
    };

    let mut structures = Vec::with_capacity(spec.structures);
    for _ in 0..spec.structures {
        let mut c = [0.0; 3];
        let mut axes = [0.0; 3];
        for a in 0..3 {
            c[a] = brain.center[a] + brain.axes[a] * uniform(&mut rng, -0.45, 0.45);
            axes[a] = brain.axes[a] * uniform(&mut rng, 0.2, 0.5);
        }
        let delta = uniform(&mut rng, 0.15, 0.35) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        structures.push((Ellipsoid { center: c, axes }, delta));
    }
    let freq: [f64; 3] = core::array::from_fn(|a| uniform(&mut rng, 0.5, 1.5) * core::f64::consts::PI / brain.axes[a]);
    let phase = uniform(&mut rng, 0.0, 2.0 * core::f64::consts::PI);

    let mut raw = vec![0.0f32; d * h * w];
    let mut inside = vec![false; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let i = (z * h + y) * w + x;
                let rho2 = brain.rho2(p);
                let noise: f64 = rng.sample::<f64, _>(StandardNormal) * spec.noise;
                if rho2 >= 1.0 {
                    continue;
                }
                inside[i] = true;
                // brighter rim, darker core, then nested structures and texture
                let mut v = 0.5 + 0.25 * rho2;
                for (e, delta) in &structures {
                    v += delta * smoothstep_inside(e.rho2(p), 0.15);
                }
                v += 0.06 * libm::sin(freq[0] * p[0] + freq[1] * p[1] + freq[2] * p[2] + phase);
                raw[i] = (v + noise).max(0.05) as f32;
            }
        }
    }
    let ground_truth = preprocess(&Volume::new(spec.dims, raw)?);

    let mut mask = vec![0.0f32; d * h * w];
    for _ in 0..spec.mask_count {
        let r = uniform(&mut rng, spec.mask_radius[0], spec.mask_radius[1]);
        let shrunk = Ellipsoid { center: brain.center, axes: brain.axes.map(|a| a - r - 1.0) };
        if shrunk.axes.iter().any(|&a| a <= 0.0) {
            bail!(Domain, "mask radius {:.2} does not fit inside the brain", r);
        }
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let c: [f64; 3] = core::array::from_fn(|a| brain.center[a] + shrunk.axes[a] * uniform(&mut rng, -1.0, 1.0));
            if shrunk.rho2(c) < 1.0 {
                placed = Some(c);
                break;
            }
        }
        let Some(c) = placed else { bail!(Domain, "could not place a radius {:.2} mask inside the brain", r) };
        let mut hit = false;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let p = [z as f64, y as f64, x as f64];
                    let dist2: f64 = (0..3).map(|a| sq(p[a] - c[a])).sum();
                    let i = (z * h + y) * w + x;
                    if dist2 <= r * r && inside[i] {
                        mask[i] = 1.0;
                        hit = true;
                    }
                }
            }
        }
        if !hit {
            bail!(Domain, "mask sphere of radius {:.2} covers no brain voxel", r);
        }
    }
    MaskedCase::from_ground_truth(ground_truth, Volume::new(spec.dims, mask)?)
}
