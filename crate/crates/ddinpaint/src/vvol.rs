//! Native volume format: `"VVOL"`, `u32` version, three `u32` dims
//! (`D, H, W`), then little-endian `f32` voxels, axial-slice-major.

use std::path::Path;

use ddinpaint_core::volume::Volume;

use crate::error::{read_file, write_atomic, Error, Result};

pub const MAGIC: &[u8; 4] = b"VVOL";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

pub fn encode(volume: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * volume.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in volume.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in volume.voxels() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4-byte slice"))
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Volume> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, format!("truncated header: {} of {} bytes", bytes.len(), HEADER_LEN)));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(path, format!("bad magic {:?} at offset 0, expected \"VVOL\"", &bytes[..4])));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version} at offset 4")));
    }
    let dims = [u32_at(bytes, 8) as usize, u32_at(bytes, 12) as usize, u32_at(bytes, 16) as usize];
    let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let need = count.and_then(|c| c.checked_mul(4));
    let body = &bytes[HEADER_LEN..];
    match need {
        Some(n) if n == body.len() => {}
        Some(n) => {
            return Err(Error::format(
                path,
                format!("dims {dims:?} need {n} bytes of voxels from offset {HEADER_LEN}, found {}", body.len()),
            ))
        }
        None => return Err(Error::format(path, format!("dims {dims:?} overflow"))),
    }
    let voxels = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk"))).collect();
    Volume::new(dims, voxels).map_err(|e| Error::format(path, e.to_string()))
}

pub fn read(path: &Path) -> Result<Volume> {
    decode(&read_file(path)?, path)
}

pub fn write(path: &Path, volume: &Volume) -> Result<()> {
    write_atomic(path, &encode(volume))
}
