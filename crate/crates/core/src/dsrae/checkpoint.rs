//! Binary checkpoint format:
//!
//! ```text
//! magic  "DSRAE\0v1"                  8 bytes
//! header length                      u64 LE
//! header                             UTF-8 JSON
//! parameter blocks                   f64 LE, manifest order
//! checksum                           u64 LE, FNV-1a over header + blocks
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::params::{Architecture, Hyper, Mode, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;
use crate::schema::NormStats;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DSRAE\0v1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the parameter blocks.
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    scalar: String,
    mode: Mode,
    arch: Architecture,
    hyper: Hyper,
    norm: Option<NormStats>,
    manifest: Vec<Entry>,
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

fn encode<T: Scalar>(params: &ModelParams<T>) -> Result<Vec<u8>> {
    let mut manifest = Vec::new();
    let mut blocks = Vec::new();
    for (name, t) in params.tensors() {
        let offset = blocks.len() as u64;
        for &v in t.data() {
            blocks.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        manifest.push(Entry {
            name,
            shape: t.shape().to_vec(),
            offset,
            len: t.len() as u64,
        });
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        scalar: T::NAME.to_string(),
        mode: params.mode,
        arch: params.arch.clone(),
        hyper: params.hyper.clone(),
        norm: params.norm.clone(),
        manifest,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(24 + json.len() + blocks.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blocks);
    let sum = fnv1a64(&out[16..]);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

fn decode<T: Scalar>(bytes: &[u8]) -> std::result::Result<ModelParams<T>, String> {
    if bytes.len() < 24 {
        return Err("truncated file".into());
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err("bad magic or unsupported format version".into());
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let body_end = bytes.len() - 8;
    let stored = u64::from_le_bytes(bytes[body_end..].try_into().unwrap());
    if fnv1a64(&bytes[16..body_end]) != stored {
        return Err("checksum mismatch (corrupted or truncated)".into());
    }
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|l| l.checked_add(16))
        .filter(|&e| e <= body_end)
        .ok_or("header length exceeds file")?;
    let header: Header =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| format!("malformed header: {e}"))?;
    if header.format_version != FORMAT_VERSION {
        return Err(format!("unsupported format version {}", header.format_version));
    }
    let blocks = &bytes[header_end..body_end];
    let mut params =
        ModelParams::<T>::init(&header.arch, &header.hyper, header.mode, 0).map_err(|e| e.to_string())?;
    let expected: Vec<(String, Vec<usize>)> =
        params.tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    if expected.len() != header.manifest.len() {
        return Err(format!(
            "manifest lists {} tensors, architecture needs {}",
            header.manifest.len(),
            expected.len()
        ));
    }
    let mut consumed = 0u64;
    for ((entry, (name, shape)), slot) in header.manifest.iter().zip(&expected).zip(params.tensors_mut()) {
        if &entry.name != name || &entry.shape != shape {
            return Err(format!("manifest entry {} {:?} does not match {name} {shape:?}", entry.name, entry.shape));
        }
        if entry.offset != consumed || entry.len != shape.iter().product::<usize>() as u64 {
            return Err(format!("manifest entry {} has inconsistent offset/length", entry.name));
        }
        let start = entry.offset as usize;
        let end = start + entry.len as usize * 8;
        let raw = blocks.get(start..end).ok_or("truncated parameter block")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        *slot = Tensor::from_vec(shape, data).map_err(|e| format!("{}: {e}", entry.name))?;
        consumed = end as u64;
    }
    if consumed != blocks.len() as u64 {
        return Err("trailing bytes after parameter blocks".into());
    }
    params.norm = header.norm;
    Ok(params)
}

/// Writes via a temporary sibling file and rename, so an existing checkpoint
/// is never left half-written.
pub fn save_checkpoint<T: Scalar>(params: &ModelParams<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(params)?;
    let mut tmp = PathBuf::from(path);
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".tmp{}", std::process::id()));
    tmp.set_file_name(name);
    let io_err = |e: std::io::Error| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    {
        let mut f = fs::File::create(&tmp).map_err(io_err)?;
        f.write_all(&bytes).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
    }
    fs::rename(&tmp, path).map_err(io_err)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelParams<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    decode(&bytes).map_err(|reason| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(mode: Mode) -> ModelParams<f64> {
        let arch = Architecture {
            conv_channels: vec![2, 3],
            latent_dim: 6,
            dsr_dim: 3,
            ..Architecture::default()
        };
        ModelParams::init(&arch, &Hyper::default(), mode, 5).unwrap()
    }

    #[test]
    fn bytes_round_trip() {
        let p = params(Mode::Dsr);
        let q: ModelParams<f64> = decode(&encode(&p).unwrap()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn every_header_byte_is_protected() {
        let bytes = encode(&params(Mode::Rsr)).unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        for i in 0..16 + header_len {
            let mut bad = bytes.clone();
            bad[i] ^= 0x01;
            assert!(decode::<f64>(&bad).is_err(), "flip at byte {i} accepted");
        }
    }

    #[test]
    fn truncation_rejected() {
        let bytes = encode(&params(Mode::Dsr)).unwrap();
        for cut in [0, 7, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode::<f64>(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn rsr_has_no_detention_branch() {
        let q: ModelParams<f64> = decode(&encode(&params(Mode::Rsr)).unwrap()).unwrap();
        assert!(q.detention.is_none());
        assert!(q.detention_branch().is_err());
    }
}
