//! Single-file NIfTI-1 subset: little-endian, `float32` voxels, no
//! compression. The 348-byte header and any extension bytes up to
//! `vox_offset` are kept verbatim so a read/write cycle reproduces them.
//!
//! NIfTI stores `x` fastest; `dim[1..=3]` map to `[W, H, D]`, which is the
//! same memory order as an axial-slice-major [`Volume`].

use std::path::Path;

use ddinpaint_core::volume::Volume;

use crate::error::{read_file, write_atomic, Error, Result};

pub const HEADER_LEN: usize = 348;
const DIM_OFFSET: usize = 40;
const DATATYPE_OFFSET: usize = 70;
const BITPIX_OFFSET: usize = 72;
const PIXDIM_OFFSET: usize = 76;
const VOX_OFFSET_OFFSET: usize = 108;
const MAGIC_OFFSET: usize = 344;
const MAGIC: &[u8; 4] = b"n+1\0";
pub const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct NiftiVolume {
    /// Header bytes, exactly [`HEADER_LEN`] long.
    pub header: Vec<u8>,
    /// Bytes between the header and the voxel data.
    pub extension: Vec<u8>,
    pub volume: Volume,
}

fn i16_at(b: &[u8], o: usize) -> i16 {
    i16::from_le_bytes([b[o], b[o + 1]])
}

fn f32_at(b: &[u8], o: usize) -> f32 {
    f32::from_le_bytes(b[o..o + 4].try_into().expect("4 bytes"))
}

fn datatype_name(code: i16) -> &'static str {
    match code {
        2 => "uint8",
        4 => "int16",
        8 => "int32",
        DT_FLOAT32 => "float32",
        DT_FLOAT64 => "float64",
        256 => "int8",
        512 => "uint16",
        768 => "uint32",
        _ => "unknown",
    }
}

impl NiftiVolume {
    /// Header for `volume` with unit spacing and data right after a
    /// 4-byte empty extension block.
    pub fn minimal(volume: Volume) -> Self {
        let mut header = vec![0u8; HEADER_LEN];
        header[..4].copy_from_slice(&(HEADER_LEN as i32).to_le_bytes());
        for k in 0..8 {
            header[PIXDIM_OFFSET + 4 * k..][..4].copy_from_slice(&1.0f32.to_le_bytes());
        }
        header[MAGIC_OFFSET..MAGIC_OFFSET + 4].copy_from_slice(MAGIC);
        let mut n = Self { header, extension: vec![0; 4], volume };
        n.sync_header();
        n
    }

    /// Same header and extension, different voxels (dims may change).
    pub fn with_volume(&self, volume: Volume) -> Self {
        let mut n = Self { header: self.header.clone(), extension: self.extension.clone(), volume };
        n.sync_header();
        n
    }

    /// Write dims, datatype, bitpix and `vox_offset` from the current state.
    fn sync_header(&mut self) {
        let [d, h, w] = self.volume.dims();
        let dims: [i16; 8] = [3, w as i16, h as i16, d as i16, 1, 1, 1, 1];
        for (k, v) in dims.iter().enumerate() {
            self.header[DIM_OFFSET + 2 * k..][..2].copy_from_slice(&v.to_le_bytes());
        }
        self.header[DATATYPE_OFFSET..][..2].copy_from_slice(&DT_FLOAT32.to_le_bytes());
        self.header[BITPIX_OFFSET..][..2].copy_from_slice(&32i16.to_le_bytes());
        let offset = (HEADER_LEN + self.extension.len()) as f32;
        self.header[VOX_OFFSET_OFFSET..][..4].copy_from_slice(&offset.to_le_bytes());
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.extension.len() + 4 * self.volume.len());
        out.extend_from_slice(&self.header);
        out.extend_from_slice(&self.extension);
        for v in self.volume.voxels() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::format(path, format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len())));
        }
        let sizeof_hdr = i32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"));
        if sizeof_hdr != HEADER_LEN as i32 {
            let msg = if sizeof_hdr.swap_bytes() == HEADER_LEN as i32 {
                "big-endian NIfTI is not supported".to_string()
            } else {
                format!("sizeof_hdr {sizeof_hdr} at offset 0, expected 348")
            };
            return Err(Error::format(path, msg));
        }
        if &bytes[MAGIC_OFFSET..MAGIC_OFFSET + 4] != MAGIC {
            return Err(Error::format(path, format!("magic at offset {MAGIC_OFFSET} is not \"n+1\" (only single-file NIfTI-1 is supported)")));
        }
        let datatype = i16_at(bytes, DATATYPE_OFFSET);
        if datatype != DT_FLOAT32 {
            return Err(Error::format(
                path,
                format!("unsupported datatype {} ({}) at offset {DATATYPE_OFFSET}; only float32 is supported", datatype, datatype_name(datatype)),
            ));
        }
        let dim: Vec<i16> = (0..8).map(|k| i16_at(bytes, DIM_OFFSET + 2 * k)).collect();
        let rank = dim[0];
        if !(1..=7).contains(&rank) {
            return Err(Error::format(path, format!("dim[0] = {rank} at offset {DIM_OFFSET} is out of range")));
        }
        let extent = |k: usize| if (k as i16) <= rank { dim[k] } else { 1 };
        if (4..=rank as usize).any(|k| dim[k] != 1) {
            return Err(Error::format(path, format!("only 3D volumes are supported, dim = {dim:?}")));
        }
        let (w, h, d) = (extent(1), extent(2), extent(3));
        if w < 1 || h < 1 || d < 1 {
            return Err(Error::format(path, format!("non-positive extent in dim = {dim:?}")));
        }
        let vox_offset = f32_at(bytes, VOX_OFFSET_OFFSET);
        if !(vox_offset >= HEADER_LEN as f32) || vox_offset.fract() != 0.0 {
            return Err(Error::format(path, format!("vox_offset {vox_offset} at offset {VOX_OFFSET_OFFSET} is invalid")));
        }
        let start = vox_offset as usize;
        let count = w as usize * h as usize * d as usize;
        let end = start + 4 * count;
        if bytes.len() < end {
            return Err(Error::format(
                path,
                format!("voxel data truncated: need bytes {start}..{end}, file has {}", bytes.len()),
            ));
        }
        let voxels = bytes[start..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let volume = Volume::new([d as usize, h as usize, w as usize], voxels).map_err(|e| Error::format(path, e.to_string()))?;
        Ok(Self { header: bytes[..HEADER_LEN].to_vec(), extension: bytes[HEADER_LEN..start].to_vec(), volume })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }
}
