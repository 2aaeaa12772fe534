//! On-disk case layout: `<root>/manifest.json` plus one directory per case
//! holding `gt.vvol` (optional), `mask.vvol` and `baseline.vvol`. The
//! `.nii` variants of those names are accepted when reading.

use std::path::{Path, PathBuf};

use ddinpaint_core::volume::{MaskedCase, Volume};
use serde::{Deserialize, Serialize};

use crate::error::{read_file, write_atomic, Error, Result};
use crate::volume_io::{read_volume, write_volume};

pub const MANIFEST: &str = "manifest.json";
pub const GT: &str = "gt";
pub const MASK: &str = "mask";
pub const BASELINE: &str = "baseline";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub cases: Vec<ManifestCase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestCase {
    pub id: String,
    /// Directory relative to the manifest.
    pub dir: String,
    pub dims: [usize; 3],
}

pub fn case_dir_name(index: usize) -> String {
    format!("case_{index:04}")
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST);
    serde_json::from_slice(&read_file(&path)?).map_err(|e| Error::json(&path, e))
}

pub fn write_manifest(root: &Path, manifest: &Manifest) -> Result<()> {
    let path = root.join(MANIFEST);
    let mut json = serde_json::to_vec_pretty(manifest).map_err(|e| Error::json(&path, e))?;
    json.push(b'\n');
    write_atomic(&path, &json)
}

/// `<dir>/<stem>.vvol`, or `<dir>/<stem>.nii` if only that exists.
pub fn member_path(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["vvol", "nii"].iter().map(|ext| dir.join(format!("{stem}.{ext}"))).find(|p| p.is_file())
}

fn require(dir: &Path, stem: &str) -> Result<PathBuf> {
    member_path(dir, stem).ok_or_else(|| Error::format(dir, format!("missing {stem}.vvol")))
}

/// Mask values are binarized at 0.5 on the way in.
pub fn read_mask(path: &Path) -> Result<Volume> {
    Ok(read_volume(path)?.binarized())
}

/// Baseline and mask only; ground truth is never opened.
pub fn read_inference_case(dir: &Path) -> Result<MaskedCase> {
    let mask = read_mask(&require(dir, MASK)?)?;
    let baseline = read_volume(&require(dir, BASELINE)?)?;
    MaskedCase::new(None, mask, baseline).map_err(|e| Error::format(dir, e.to_string()))
}

/// Ground truth and mask for training. The stored baseline is ignored and
/// re-derived by voiding after any preprocessing.
pub fn read_training_volumes(dir: &Path) -> Result<(Volume, Volume)> {
    let gt = read_volume(&require(dir, GT)?)?;
    let mask = read_mask(&require(dir, MASK)?)?;
    if gt.dims() != mask.dims() {
        return Err(Error::format(dir, format!("gt {:?} and mask {:?} differ", gt.dims(), mask.dims())));
    }
    Ok((gt, mask))
}

pub fn write_case(dir: &Path, case: &MaskedCase) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if let Some(gt) = &case.ground_truth {
        write_volume(&dir.join(format!("{GT}.vvol")), gt, None)?;
    }
    write_volume(&dir.join(format!("{MASK}.vvol")), &case.mask, None)?;
    write_volume(&dir.join(format!("{BASELINE}.vvol")), &case.baseline, None)
}
