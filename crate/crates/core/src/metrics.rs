//! Masked-region MSE, PSNR and SSIM, and aggregate reports.
//!
//! SSIM is computed on axial slices with a Gaussian window. Near slice
//! borders the window is truncated and its weights renormalized, so every
//! voxel gets a map value; the masked score averages that map over the mask.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::stats::mean_std;
use crate::volume::Volume;

/// PSNR reported for a zero error.
pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub data_range: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, data_range: 1.0, k1: 0.01, k2: 0.03 }
    }
}

/// How the SSIM map is restricted to the inpainted region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsimRegion {
    /// Average of the full-slice SSIM map over mask voxels.
    #[default]
    MaskAverage,
    /// Crop both volumes to the mask's bounding box, average the map of the crop.
    BoundingBox,
}

fn check_triplet(pred: &Volume, gt: &Volume, mask: &Volume) -> Result<usize> {
    if pred.dims() != gt.dims() || mask.dims() != gt.dims() {
        bail!(Shape, "dims differ: pred {:?}, gt {:?}, mask {:?}", pred.dims(), gt.dims(), mask.dims());
    }
    let n = mask.voxels().iter().filter(|&&m| m != 0.0).count();
    if n == 0 {
        bail!(Domain, "mask is empty");
    }
    Ok(n)
}

/// Mean squared error over mask voxels.
pub fn masked_mse(pred: &Volume, gt: &Volume, mask: &Volume) -> Result<f64> {
    let n = check_triplet(pred, gt, mask)?;
    let sum: f64 = pred
        .voxels()
        .iter()
        .zip(gt.voxels())
        .zip(mask.voxels())
        .filter(|(_, &m)| m != 0.0)
        .map(|((&p, &g), _)| {
            let d = p as f64 - g as f64;
            d * d
        })
        .sum();
    Ok(sum / n as f64)
}

/// `10·log10(range² / mse)` in dB, [`PSNR_CAP_DB`] when the error is zero.
pub fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * libm::log10(data_range * data_range / mse)).min(PSNR_CAP_DB)
}

pub fn masked_psnr(pred: &Volume, gt: &Volume, mask: &Volume, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        bail!(Config, "data range must be positive");
    }
    Ok(psnr_from_mse(masked_mse(pred, gt, mask)?, data_range))
}

fn gaussian_window(params: &SsimParams) -> Result<Vec<f64>> {
    if params.window % 2 == 0 || params.window == 0 {
        bail!(Config, "SSIM window must be odd, got {}", params.window);
    }
    if !(params.sigma > 0.0) || !(params.data_range > 0.0) {
        bail!(Config, "SSIM sigma and data range must be positive");
    }
    let r = (params.window / 2) as isize;
    let s2 = 2.0 * params.sigma * params.sigma;
    let mut k: Vec<f64> = (-r..=r).map(|x| libm::exp(-((x * x) as f64) / s2)).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    Ok(k)
}

/// Truncated, renormalized separable filter of one `h × w` plane.
fn filter_plane(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let pass = |src: &[f64], along_rows: bool| {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let (pos, len) = if along_rows { (x as isize, w as isize) } else { (y as isize, h as isize) };
                let (mut acc, mut mass) = (0.0, 0.0);
                for (ki, &kv) in k.iter().enumerate() {
                    let p = pos + ki as isize - r;
                    if (0..len).contains(&p) {
                        let idx = if along_rows { y * w + p as usize } else { p as usize * w + x };
                        acc += kv * src[idx];
                        mass += kv;
                    }
                }
                out[y * w + x] = acc / mass;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

/// Slice-wise SSIM map, same layout as the inputs.
pub fn ssim_map(a: &Volume, b: &Volume, params: &SsimParams) -> Result<Vec<f64>> {
    if a.dims() != b.dims() {
        bail!(Shape, "dims differ: {:?} vs {:?}", a.dims(), b.dims());
    }
    let k = gaussian_window(params)?;
    let [d, h, w] = a.dims();
    let c1 = (params.k1 * params.data_range) * (params.k1 * params.data_range);
    let c2 = (params.k2 * params.data_range) * (params.k2 * params.data_range);
    let mut map = Vec::with_capacity(a.len());
    for z in 0..d {
        let x: Vec<f64> = a.slice(z).iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.slice(z).iter().map(|&v| v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
        let mx = filter_plane(&x, h, w, &k);
        let my = filter_plane(&y, h, w, &k);
        let mxx = filter_plane(&prod(&x, &x), h, w, &k);
        let myy = filter_plane(&prod(&y, &y), h, w, &k);
        let mxy = filter_plane(&prod(&x, &y), h, w, &k);
        for i in 0..h * w {
            let vx = mxx[i] - mx[i] * mx[i];
            let vy = myy[i] - my[i] * my[i];
            let cxy = mxy[i] - mx[i] * my[i];
            let num = (2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2);
            let den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2);
            map.push(num / den);
        }
    }
    Ok(map)
}

/// Inclusive-exclusive bounds `[lo, hi)` of the nonzero mask voxels per axis.
fn bounding_box(mask: &Volume) -> [[usize; 2]; 3] {
    let [d, h, w] = mask.dims();
    let mut bb = [[usize::MAX, 0]; 3];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if mask.get(z, y, x) != 0.0 {
                    for (a, p) in [z, y, x].into_iter().enumerate() {
                        bb[a][0] = bb[a][0].min(p);
                        bb[a][1] = bb[a][1].max(p + 1);
                    }
                }
            }
        }
    }
    bb
}

fn crop(v: &Volume, bb: &[[usize; 2]; 3]) -> Result<Volume> {
    let mut out = Vec::new();
    for z in bb[0][0]..bb[0][1] {
        for y in bb[1][0]..bb[1][1] {
            for x in bb[2][0]..bb[2][1] {
                out.push(v.get(z, y, x));
            }
        }
    }
    Volume::new(bb.map(|[lo, hi]| hi - lo), out)
}

/// SSIM restricted to the mask. A region smaller than the window still
/// gets a score from the truncated windows that cover it.
pub fn masked_ssim(pred: &Volume, gt: &Volume, mask: &Volume, params: &SsimParams, region: SsimRegion) -> Result<f64> {
    let n = check_triplet(pred, gt, mask)?;
    match region {
        SsimRegion::MaskAverage => {
            let map = ssim_map(pred, gt, params)?;
            let sum: f64 = map.iter().zip(mask.voxels()).filter(|(_, &m)| m != 0.0).map(|(s, _)| s).sum();
            Ok(sum / n as f64)
        }
        SsimRegion::BoundingBox => {
            let bb = bounding_box(mask);
            let map = ssim_map(&crop(pred, &bb)?, &crop(gt, &bb)?, params)?;
            Ok(map.iter().sum::<f64>() / map.len() as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub ssim: f64,
    pub psnr: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub ssim: SsimParams,
    pub region: SsimRegion,
}

pub fn evaluate_case(case_id: &str, pred: &Volume, gt: &Volume, mask: &Volume, settings: &EvalSettings) -> Result<CaseMetrics> {
    let mse = masked_mse(pred, gt, mask)?;
    Ok(CaseMetrics {
        case_id: case_id.into(),
        ssim: masked_ssim(pred, gt, mask, &settings.ssim, settings.region)?,
        psnr: psnr_from_mse(mse, settings.ssim.data_range),
        mse,
    })
}

/// Mean and population standard deviation of one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

impl Aggregate {
    fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std }
    }
}

impl core::fmt::Display for Aggregate {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{:.4} [±{:.4}]", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cases: Vec<CaseMetrics>,
    pub ssim: Aggregate,
    pub psnr: Aggregate,
    pub mse: Aggregate,
}

pub fn make_report(cases: Vec<CaseMetrics>) -> Result<MetricsReport> {
    if cases.is_empty() {
        bail!(Domain, "a report needs at least one case");
    }
    let col = |f: fn(&CaseMetrics) -> f64| cases.iter().map(f).collect::<Vec<f64>>();
    let ssim = Aggregate::of(&col(|c| c.ssim));
    let psnr = Aggregate::of(&col(|c| c.psnr));
    let mse = Aggregate::of(&col(|c| c.mse));
    Ok(MetricsReport { cases, ssim, psnr, mse })
}

impl MetricsReport {
    /// Header `case_id,ssim,psnr,mse`, one row per case, then `mean` and
    /// `std` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("case_id,ssim,psnr,mse\n");
        for c in &self.cases {
            let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", c.case_id, c.ssim, c.psnr, c.mse);
        }
        let _ = writeln!(s, "mean,{:.6},{:.6},{:.6}", self.ssim.mean, self.psnr.mean, self.mse.mean);
        let _ = writeln!(s, "std,{:.6},{:.6},{:.6}", self.ssim.std, self.psnr.std, self.mse.std);
        s
    }

    pub fn to_table(&self) -> String {
        let width = self.cases.iter().map(|c| c.case_id.len()).max().unwrap_or(0).max(7);
        let mut s = format!("{:<width$}  {:>18}  {:>20}  {:>18}\n", "case", "SSIM", "PSNR", "MSE");
        for c in &self.cases {
            let _ = writeln!(s, "{:<width$}  {:>18.4}  {:>20.4}  {:>18.4}", c.case_id, c.ssim, c.psnr, c.mse);
        }
        let _ = writeln!(s, "{:<width$}  {:>18}  {:>20}  {:>18}", "mean±sd", self.ssim.to_string(), self.psnr.to_string(), self.mse.to_string());
        s
    }
}
