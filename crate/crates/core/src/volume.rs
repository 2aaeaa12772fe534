//! 3D scalar volumes, cases, intensity preprocessing, slice selection and
//! reassembly.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::stats::{percentile, percentile_sorted};

/// Lower/upper percentile removed by [`preprocess`].
pub const PREPROCESS_CLIP_PERCENT: f64 = 0.1;
/// Lower/upper percentile of the reference range used by [`renormalize_output`].
pub const RENORM_CLIP_PERCENT: f64 = 0.5;
/// Threshold at which ingested mask values become 1.
pub const MASK_THRESHOLD: f32 = 0.5;

/// Scalar grid with dims `[D, H, W]`, stored axial-slice-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], voxels: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            bail!(Shape, "volume dims must be positive, got {:?}", dims);
        }
        if dims.iter().product::<usize>() != voxels.len() {
            bail!(Shape, "dims {:?} need {} voxels, got {}", dims, dims.iter().product::<usize>(), voxels.len());
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            bail!(Domain, "non-finite voxel at flat index {}", i);
        }
        Ok(Self { dims, voxels })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self { dims, voxels: vec![0.0; dims.iter().product()] }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn slice_len(&self) -> usize {
        self.dims[1] * self.dims[2]
    }

    pub fn slice(&self, index: usize) -> &[f32] {
        let n = self.slice_len();
        &self.voxels[index * n..(index + 1) * n]
    }

    fn slice_mut(&mut self, index: usize) -> &mut [f32] {
        let n = self.slice_len();
        &mut self.voxels[index * n..(index + 1) * n]
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> f32 {
        self.voxels[(d * self.dims[1] + h) * self.dims[2] + w]
    }

    /// Elementwise map; the result must stay finite.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(self.dims, self.voxels.iter().map(|&v| f(v)).collect())
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.voxels.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn is_binary(&self) -> bool {
        self.voxels.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Map every value to 1 if it is at least [`MASK_THRESHOLD`], else 0.
    pub fn binarized(&self) -> Self {
        let voxels = self.voxels.iter().map(|&v| if v >= MASK_THRESHOLD { 1.0 } else { 0.0 }).collect();
        Self { dims: self.dims, voxels }
    }

    pub(crate) fn from_parts_unchecked(dims: [usize; 3], voxels: Vec<f32>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), voxels.len());
        Self { dims, voxels }
    }
}

/// `x ⊙ (1 − m)`.
pub fn void(volume: &Volume, mask: &Volume) -> Result<Volume> {
    if volume.dims != mask.dims {
        bail!(Shape, "volume {:?} and mask {:?} differ", volume.dims, mask.dims);
    }
    let voxels = volume.voxels.iter().zip(&mask.voxels).map(|(&x, &m)| x * (1.0 - m)).collect();
    Ok(Volume::from_parts_unchecked(volume.dims, voxels))
}

/// Ground truth (absent at inference), binary mask and voided baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedCase {
    pub ground_truth: Option<Volume>,
    pub mask: Volume,
    pub baseline: Volume,
}

impl MaskedCase {
    /// Validate an assembled case. The mask must already be binary.
    pub fn new(ground_truth: Option<Volume>, mask: Volume, baseline: Volume) -> Result<Self> {
        if !mask.is_binary() {
            bail!(Domain, "mask is not binary");
        }
        if baseline.dims != mask.dims {
            bail!(Shape, "baseline {:?} and mask {:?} differ", baseline.dims, mask.dims);
        }
        if let Some(gt) = &ground_truth {
            if void(gt, &mask)? != baseline {
                bail!(Domain, "baseline is not the ground truth voided by the mask");
            }
        }
        Ok(Self { ground_truth, mask, baseline })
    }

    /// Build a training case; the baseline is derived by voiding.
    pub fn from_ground_truth(ground_truth: Volume, mask: Volume) -> Result<Self> {
        if !mask.is_binary() {
            bail!(Domain, "mask is not binary");
        }
        let baseline = void(&ground_truth, &mask)?;
        Ok(Self { ground_truth: Some(ground_truth), mask, baseline })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.mask.dims
    }

    /// The same case without its ground truth.
    pub fn without_ground_truth(&self) -> Self {
        Self { ground_truth: None, mask: self.mask.clone(), baseline: self.baseline.clone() }
    }
}

/// Clamp to the `[p0.1, p99.9]` percentiles of all voxels, then rescale
/// linearly to `[0, 1]`. A volume without spread maps to zeros.
pub fn preprocess(volume: &Volume) -> Volume {
    let mut sorted = volume.voxels.clone();
    sorted.sort_unstable_by(|a, b| a.total_cmp(b));
    let lo = percentile_sorted(&sorted, PREPROCESS_CLIP_PERCENT);
    let hi = percentile_sorted(&sorted, 100.0 - PREPROCESS_CLIP_PERCENT);
    let span = hi as f64 - lo as f64;
    let voxels = if span > 0.0 {
        volume.voxels.iter().map(|&v| ((v.clamp(lo, hi) as f64 - lo as f64) / span).clamp(0.0, 1.0) as f32).collect()
    } else {
        vec![0.0; volume.len()]
    };
    Volume::from_parts_unchecked(volume.dims, voxels)
}

/// Map `output`'s own `[min, max]` affinely onto `[p0.5, p99.5]` of
/// `reference`. A constant output maps to the midpoint of that interval.
pub fn renormalize_output(output: &Volume, reference: &Volume) -> Volume {
    let lo = percentile(&reference.voxels, RENORM_CLIP_PERCENT) as f64;
    let hi = percentile(&reference.voxels, 100.0 - RENORM_CLIP_PERCENT) as f64;
    let (omin, omax) = output.min_max();
    let (omin, omax) = (omin as f64, omax as f64);
    let voxels = if omax > omin {
        let scale = (hi - lo) / (omax - omin);
        output.voxels.iter().map(|&v| (lo + (v as f64 - omin) * scale) as f32).collect()
    } else {
        vec![(0.5 * (lo + hi)) as f32; output.len()]
    };
    Volume::from_parts_unchecked(output.dims, voxels)
}

/// Placement of a cropped or padded in-plane window, one entry per
/// in-plane axis (`H`, `W`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    /// In-plane size of the volume before cropping.
    pub original: [usize; 2],
    pub size: usize,
    /// First copied row/column in the original slice.
    pub source_start: [usize; 2],
    /// First copied row/column in the cropped slice (non-zero when padded).
    pub target_start: [usize; 2],
    /// Rows/columns copied.
    pub extent: [usize; 2],
}

impl CropWindow {
    pub fn new(original: [usize; 2], size: usize) -> Self {
        let mut w = Self { original, size, source_start: [0; 2], target_start: [0; 2], extent: [0; 2] };
        for a in 0..2 {
            if original[a] >= size {
                w.source_start[a] = (original[a] - size) / 2;
                w.extent[a] = size;
            } else {
                w.target_start[a] = (size - original[a]) / 2;
                w.extent[a] = original[a];
            }
        }
        w
    }
}

fn copy_window(src: &Volume, dst: &mut Volume, from: [usize; 2], to: [usize; 2], extent: [usize; 2]) {
    let [_, _, sw] = src.dims;
    let [_, _, dw] = dst.dims;
    for d in 0..src.dims[0] {
        for r in 0..extent[0] {
            let s = src.slice(d);
            let row = &s[(from[0] + r) * sw + from[1]..][..extent[1]];
            let t = dst.slice_mut(d);
            t[(to[0] + r) * dw + to[1]..][..extent[1]].copy_from_slice(row);
        }
    }
}

/// Center-crop (or zero-pad, per axis) every axial slice to `size × size`.
pub fn center_crop_slices(volume: &Volume, size: usize) -> Result<(Volume, CropWindow)> {
    if size == 0 {
        bail!(Config, "crop size must be positive");
    }
    let [d, h, w] = volume.dims;
    let window = CropWindow::new([h, w], size);
    let mut out = Volume::zeros([d, size, size]);
    copy_window(volume, &mut out, window.source_start, window.target_start, window.extent);
    Ok((out, window))
}

/// Inverse of [`center_crop_slices`]: place the window back into a zero
/// volume of the original in-plane size.
pub fn re_embed(cropped: &Volume, window: &CropWindow) -> Result<Volume> {
    let [d, h, w] = cropped.dims;
    if h != window.size || w != window.size {
        bail!(Shape, "cropped slices are {}x{}, window expects {}x{}", h, w, window.size, window.size);
    }
    let mut out = Volume::zeros([d, window.original[0], window.original[1]]);
    copy_window(cropped, &mut out, window.target_start, window.source_start, window.extent);
    Ok(out)
}

/// One axial slice selected for inpainting.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceItem {
    pub index: usize,
    pub baseline: Vec<f32>,
    pub mask: Vec<f32>,
    pub ground_truth: Option<Vec<f32>>,
}

/// Axial indices whose mask slice has at least one nonzero voxel, ascending.
pub fn nonzero_slices(mask: &Volume) -> Vec<usize> {
    (0..mask.dims[0]).filter(|&d| mask.slice(d).iter().any(|&v| v != 0.0)).collect()
}

pub fn select_slices(case: &MaskedCase) -> Vec<SliceItem> {
    nonzero_slices(&case.mask)
        .into_iter()
        .map(|index| SliceItem {
            index,
            baseline: case.baseline.slice(index).to_vec(),
            mask: case.mask.slice(index).to_vec(),
            ground_truth: case.ground_truth.as_ref().map(|g| g.slice(index).to_vec()),
        })
        .collect()
}

/// Copy of `baseline` with the listed axial slices replaced wholesale.
pub fn reassemble(baseline: &Volume, sampled: &[(usize, Vec<f32>)]) -> Result<Volume> {
    let mut out = baseline.clone();
    let mut seen = vec![false; baseline.dims[0]];
    for (index, slice) in sampled {
        let index = *index;
        if index >= baseline.dims[0] {
            bail!(Shape, "slice index {} outside volume depth {}", index, baseline.dims[0]);
        }
        if core::mem::replace(&mut seen[index], true) {
            bail!(Domain, "slice {} listed twice", index);
        }
        if slice.len() != baseline.slice_len() {
            bail!(Shape, "slice {} has {} values, expected {}", index, slice.len(), baseline.slice_len());
        }
        if slice.iter().any(|v| !v.is_finite()) {
            bail!(Domain, "slice {} contains non-finite values", index);
        }
        out.slice_mut(index).copy_from_slice(slice);
    }
    Ok(out)
}

/// Fill the mask with the mean intensity of the unmasked brain: the
/// nonzero baseline voxels outside the mask (all outside voxels if the
/// baseline has no nonzero voxel there).
pub fn mean_fill(case: &MaskedCase) -> Volume {
    let outside = || case.baseline.voxels.iter().zip(&case.mask.voxels).filter(|(_, &m)| m == 0.0).map(|(&b, _)| b);
    let mean = |it: &mut dyn Iterator<Item = f32>| {
        let (s, n) = it.fold((0.0f64, 0usize), |(s, n), v| (s + v as f64, n + 1));
        (n > 0).then(|| (s / n as f64) as f32)
    };
    let fill = mean(&mut outside().filter(|&b| b != 0.0)).or_else(|| mean(&mut outside())).unwrap_or(0.0);
    let voxels = case.baseline.voxels.iter().zip(&case.mask.voxels).map(|(&b, &m)| if m != 0.0 { fill } else { b }).collect();
    Volume::from_parts_unchecked(case.baseline.dims, voxels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3]) -> Volume {
        let n = dims.iter().product();
        Volume::new(dims, (0..n).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn volume_rejects_bad_inputs() {
        assert!(Volume::new([2, 2, 2], vec![0.0; 7]).is_err());
        assert!(Volume::new([0, 2, 2], vec![]).is_err());
        assert!(Volume::new([1, 1, 2], vec![0.0, f32::NAN]).is_err());
    }

    #[test]
    fn preprocess_constant_is_zero() {
        let v = Volume::new([2, 3, 3], vec![7.5; 18]).unwrap();
        assert!(preprocess(&v).voxels().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn preprocess_ramp() {
        let v = ramp([10, 10, 10]);
        let p = preprocess(&v);
        let (lo, hi) = p.min_max();
        assert_eq!((lo, hi), (0.0, 1.0));
        let median = percentile(p.voxels(), 50.0);
        assert!((median - 0.5).abs() < 1e-3, "{median}");
    }

    #[test]
    fn preprocess_clamps_outlier() {
        let mut vox: Vec<f32> = (0..2000).map(|i| (i % 100) as f32 / 100.0).collect();
        vox[1234] = 1e6;
        let p = preprocess(&Volume::new([2, 10, 100], vox).unwrap());
        assert_eq!(p.voxels()[1234], 1.0);
        assert!(p.voxels().iter().enumerate().any(|(i, &v)| i != 1234 && v == 1.0));
    }

    #[test]
    fn crop_indices() {
        let v = ramp([1, 240, 240]);
        let (c, w) = center_crop_slices(&v, 224).unwrap();
        assert_eq!(c.dims(), [1, 224, 224]);
        assert_eq!(w.source_start, [8, 8]);
        assert_eq!(c.get(0, 0, 0), v.get(0, 8, 8));
        assert_eq!(c.get(0, 223, 223), v.get(0, 231, 231));
    }

    #[test]
    fn crop_identity_and_padding_roundtrip() {
        let v = ramp([2, 6, 6]);
        assert_eq!(center_crop_slices(&v, 6).unwrap().0, v);

        let small = ramp([1, 3, 5]);
        let (padded, w) = center_crop_slices(&small, 8).unwrap();
        assert_eq!(padded.dims(), [1, 8, 8]);
        assert_eq!(w.target_start, [2, 1]);
        assert_eq!(re_embed(&padded, &w).unwrap(), small);
    }

    #[test]
    fn select_and_reassemble() {
        let mut m = Volume::zeros([10, 2, 2]);
        m.slice_mut(7)[3] = 1.0;
        let gt = ramp([10, 2, 2]);
        let case = MaskedCase::from_ground_truth(gt.clone(), m).unwrap();
        let sel = select_slices(&case);
        assert_eq!(sel.len(), 1);
        assert_eq!(sel[0].index, 7);
        assert_eq!(sel[0].ground_truth.as_deref(), Some(gt.slice(7)));

        let back = reassemble(&case.baseline, &[(7, gt.slice(7).to_vec())]).unwrap();
        assert_eq!(back, gt);
        assert_eq!(reassemble(&case.baseline, &[]).unwrap(), case.baseline);
        assert!(reassemble(&case.baseline, &[(1, vec![0.0; 4]), (1, vec![0.0; 4])]).is_err());
        assert!(reassemble(&case.baseline, &[(10, vec![0.0; 4])]).is_err());
    }

    #[test]
    fn case_checks_voiding() {
        let gt = ramp([1, 2, 2]);
        let mask = Volume::new([1, 2, 2], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(MaskedCase::new(Some(gt.clone()), mask.clone(), gt.clone()).is_err());
        let c = MaskedCase::from_ground_truth(gt, mask.clone()).unwrap();
        assert_eq!(c.baseline.voxels(), &[0.0, 0.0, 2.0, 3.0]);
        let fuzzy = Volume::new([1, 2, 2], vec![0.2, 0.5, 0.49, 1.0]).unwrap();
        assert_eq!(fuzzy.binarized().voxels(), &[0.0, 1.0, 0.0, 1.0]);
        assert!(MaskedCase::new(None, fuzzy, c.baseline).is_err());
    }

    #[test]
    fn renormalize_affine() {
        let out = Volume::new([1, 1, 3], vec![0.0, 0.5, 1.0]).unwrap();
        let reference = Volume::new([1, 1, 201], (0..201).map(|i| 10.0 + i as f32 * 0.05).collect()).unwrap();
        let lo = percentile(reference.voxels(), 0.5);
        let hi = percentile(reference.voxels(), 99.5);
        let r = renormalize_output(&out, &reference);
        assert!((r.voxels()[0] - lo).abs() < 1e-5);
        assert!((r.voxels()[2] - hi).abs() < 1e-5);
        let flat = Volume::new([1, 1, 2], vec![3.0, 3.0]).unwrap();
        let r = renormalize_output(&flat, &reference);
        assert!((r.voxels()[0] - 0.5 * (lo + hi)).abs() < 1e-5);
    }

    #[test]
    fn mean_fill_uses_brain_outside_mask() {
        let gt = Volume::new([1, 1, 5], vec![0.0, 0.2, 0.4, 0.9, 0.9]).unwrap();
        let mask = Volume::new([1, 1, 5], vec![0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let case = MaskedCase::from_ground_truth(gt, mask).unwrap();
        let f = mean_fill(&case);
        assert_eq!(f.voxels(), &[0.0, 0.2, 0.4, 0.3, 0.3]);
    }
}
