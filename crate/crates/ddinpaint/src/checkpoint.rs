//! Checkpoint files: `"DFIP"`, `u32` format version, `u64` length of a
//! UTF-8 JSON metadata block, the block, then little-endian `f32` blobs in
//! manifest order for each section (raw parameters, EMA parameters, Adam
//! first and second moments).

use std::path::Path;

use ddinpaint_core::schedule::ScheduleParams;
use ddinpaint_core::trainer::{Checkpoint, RngState, TrainConfig};
use ddinpaint_core::unet::{DenoiserModel, UNetConfig};
use ddinpaint_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{read_file, write_atomic, Error, Result};

pub const MAGIC: &[u8; 4] = b"DFIP";
pub const FORMAT_VERSION: u32 = 1;
const SECTIONS: [&str; 4] = ["params", "ema", "adam_first_moment", "adam_second_moment"];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngMeta {
    seed: u64,
    stream: u64,
    /// Decimal string; the position does not fit a JSON double.
    word_pos: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    format_version: u32,
    unet: UNetConfig,
    schedule: ScheduleParams,
    train: TrainConfig,
    step: u64,
    seed: u64,
    rng: RngMeta,
    sections: Vec<String>,
    manifest: Vec<ManifestEntry>,
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let meta = Metadata {
        format_version: FORMAT_VERSION,
        unet: ckpt.unet.clone(),
        schedule: ckpt.schedule,
        train: ckpt.train.clone(),
        step: ckpt.step,
        seed: ckpt.train.seed,
        rng: RngMeta { seed: ckpt.rng.seed, stream: ckpt.rng.stream, word_pos: ckpt.rng.word_pos.to_string() },
        sections: SECTIONS.iter().map(|s| s.to_string()).collect(),
        manifest: ckpt
            .param_names
            .iter()
            .zip(&ckpt.params)
            .map(|(n, t)| ManifestEntry { name: n.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let json = serde_json::to_vec(&meta).expect("checkpoint metadata serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for section in [&ckpt.params, &ckpt.ema, &ckpt.adam_first_moment, &ckpt.adam_second_moment] {
        for t in section {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let fail = |msg: String| Error::format(path, msg);
    if bytes.len() < 16 {
        return Err(fail(format!("truncated preamble: {} of 16 bytes", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail(format!("bad magic {:?} at offset 0, expected \"DFIP\"", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(fail(format!("unsupported format version {version} (this build reads {FORMAT_VERSION})")));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let json_end = 16usize.checked_add(json_len as usize).filter(|&e| e <= bytes.len()).ok_or_else(|| {
        fail(format!("metadata of {json_len} bytes at offset 16 runs past end of file ({} bytes)", bytes.len()))
    })?;
    let meta: Metadata = serde_json::from_slice(&bytes[16..json_end]).map_err(|e| Error::json(path, e))?;
    if meta.format_version != FORMAT_VERSION || meta.sections != SECTIONS {
        return Err(fail(format!("metadata version {} / sections {:?} not understood", meta.format_version, meta.sections)));
    }

    // the manifest must be exactly what the stored config builds
    let reference = DenoiserModel::build(&meta.unet, meta.seed).map_err(|e| fail(format!("stored network config: {e}")))?;
    let expected: Vec<(&str, &[usize])> = reference.params().iter().map(|p| (p.name.as_str(), p.value.shape())).collect();
    if expected.len() != meta.manifest.len() {
        return Err(fail(format!(
            "manifest lists {} parameters but the stored config builds {}",
            meta.manifest.len(),
            expected.len()
        )));
    }
    for (e, (name, shape)) in meta.manifest.iter().zip(&expected) {
        if e.name != *name || e.shape != *shape {
            return Err(fail(format!("manifest entry {} {:?} does not match config ({} {:?})", e.name, e.shape, name, shape)));
        }
    }

    let per_section: usize = meta.manifest.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    let need = json_end + SECTIONS.len() * per_section * 4;
    if bytes.len() != need {
        return Err(fail(format!("expected {need} bytes ({} per section from offset {json_end}), file has {}", per_section * 4, bytes.len())));
    }
    let mut offset = json_end;
    let mut sections: Vec<Vec<Tensor>> = Vec::with_capacity(SECTIONS.len());
    for _ in SECTIONS {
        let mut tensors = Vec::with_capacity(meta.manifest.len());
        for e in &meta.manifest {
            let n: usize = e.shape.iter().product();
            let data = bytes[offset..offset + 4 * n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            offset += 4 * n;
            tensors.push(Tensor::new(&e.shape, data)?);
        }
        sections.push(tensors);
    }
    let word_pos = meta.rng.word_pos.parse::<u128>().map_err(|e| fail(format!("rng word_pos: {e}")))?;
    let mut it = sections.into_iter();
    let mut next = || it.next().expect("four sections");
    Ok(Checkpoint {
        unet: meta.unet,
        schedule: meta.schedule,
        train: meta.train,
        step: meta.step,
        rng: RngState { seed: meta.rng.seed, stream: meta.rng.stream, word_pos },
        param_names: meta.manifest.into_iter().map(|e| e.name).collect(),
        params: next(),
        ema: next(),
        adam_first_moment: next(),
        adam_second_moment: next(),
    })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode(ckpt))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&read_file(path)?, path)
}
