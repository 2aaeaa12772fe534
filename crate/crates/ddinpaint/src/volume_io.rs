//! Format dispatch by file extension: `.nii` is NIfTI-1, anything else VVOL.

use std::path::Path;

use ddinpaint_core::volume::Volume;

use crate::error::Result;
use crate::nifti::NiftiVolume;
use crate::vvol;

pub fn is_nifti(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("nii"))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    if is_nifti(path) {
        Ok(NiftiVolume::read(path)?.volume)
    } else {
        vvol::read(path)
    }
}

/// Write `volume`; for NIfTI output the header of `template` is reused
/// when given.
pub fn write_volume(path: &Path, volume: &Volume, template: Option<&NiftiVolume>) -> Result<()> {
    if is_nifti(path) {
        match template {
            Some(t) => t.with_volume(volume.clone()).write(path),
            None => NiftiVolume::minimal(volume.clone()).write(path),
        }
    } else {
        vvol::write(path, volume)
    }
}
