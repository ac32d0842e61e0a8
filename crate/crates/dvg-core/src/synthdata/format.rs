//! On-disk layout for paired image sets.
//!
//! A set lives in a directory holding two files:
//!
//! * `images.bin`: magic `DVGD`, a u32 format version, a u32 pair count,
//!   then per pair a u32 identity followed by the modality-N pixels and the
//!   modality-V pixels, each 1024 f32 values. All integers and floats are
//!   little-endian.
//! * `manifest.json`: seed, RNG algorithm, split layout, provenance flags
//!   and the configuration hash of the run that produced the files.
//!
//! Pixels are stored as f32; loading widens back to f64. Writers are
//! deterministic byte-for-byte given the same records.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::synthdata::render::IMAGE_PIXELS;

pub const BLOB_MAGIC: [u8; 4] = *b"DVGD";
pub const BLOB_VERSION: u32 = 1;
pub const BLOB_NAME: &str = "images.bin";
pub const MANIFEST_NAME: &str = "manifest.json";

/// One identity-labelled image pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub identity: u32,
    pub n: Vec<f64>,
    pub v: Vec<f64>,
}

/// Which side of a pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    N,
    V,
}

impl PairRecord {
    pub fn image(&self, modality: Modality) -> &[f64] {
        match modality {
            Modality::N => &self.n,
            Modality::V => &self.v,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SplitEntry {
    pub name: String,
    pub identity_start: u32,
    pub identity_count: u32,
    pub pair_start: usize,
    pub pair_count: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub rng_algorithm: String,
    pub image_side: usize,
    pub samples_per_identity: usize,
    /// True for sets produced by a generator, false for rendered data.
    pub generated: bool,
    pub config_hash: String,
    pub splits: Vec<SplitEntry>,
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

pub fn write_blob(path: &Path, pairs: &[PairRecord]) -> Result<(), DataError> {
    let mut buf: Vec<u8> =
        Vec::with_capacity(12 + pairs.len() * (4 + 2 * IMAGE_PIXELS * 4));
    buf.extend_from_slice(&BLOB_MAGIC);
    buf.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    buf.extend_from_slice(&(pairs.len() as u32).to_le_bytes());
    for pair in pairs {
        assert_eq!(pair.n.len(), IMAGE_PIXELS, "modality-N pixel count");
        assert_eq!(pair.v.len(), IMAGE_PIXELS, "modality-V pixel count");
        buf.extend_from_slice(&pair.identity.to_le_bytes());
        for &px in &pair.n {
            buf.extend_from_slice(&(px as f32).to_le_bytes());
        }
        for &px in &pair.v {
            buf.extend_from_slice(&(px as f32).to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&buf).map_err(|e| io_err(path, e))?;
    Ok(())
}

pub fn read_blob(path: &Path) -> Result<Vec<PairRecord>, DataError> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut buf)
        .map_err(|e| io_err(path, e))?;
    let at = || path.display().to_string();
    if buf.len() < 12 {
        return Err(DataError::Malformed {
            path: at(),
            detail: "image blob shorter than its header".into(),
        });
    }
    if buf[0..4] != BLOB_MAGIC {
        return Err(DataError::BadMagic { path: at(), expected: BLOB_MAGIC });
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != BLOB_VERSION {
        return Err(DataError::BadVersion { path: at(), got: version, expected: BLOB_VERSION });
    }
    let count = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let record_len = 4 + 2 * IMAGE_PIXELS * 4;
    let expected = 12 + count * record_len;
    if buf.len() != expected {
        return Err(DataError::Malformed {
            path: at(),
            detail: format!(
                "blob holds {} bytes, expected {} for {} pairs",
                buf.len(),
                expected,
                count
            ),
        });
    }
    let mut pairs = Vec::with_capacity(count);
    let mut off = 12;
    for _ in 0..count {
        let identity = u32::from_le_bytes(buf[off..off + 4].try_into().unwrap());
        off += 4;
        let read_image = |off: &mut usize| {
            let mut img = Vec::with_capacity(IMAGE_PIXELS);
            for _ in 0..IMAGE_PIXELS {
                let bits = u32::from_le_bytes(buf[*off..*off + 4].try_into().unwrap());
                img.push(f32::from_bits(bits) as f64);
                *off += 4;
            }
            img
        };
        let n = read_image(&mut off);
        let v = read_image(&mut off);
        for &px in n.iter().chain(v.iter()) {
            if !px.is_finite() {
                return Err(DataError::Malformed {
                    path: at(),
                    detail: "blob holds non-finite pixels".into(),
                });
            }
        }
        pairs.push(PairRecord { identity, n, v });
    }
    Ok(pairs)
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<(), DataError> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| DataError::Manifest { path: path.display().to_string(), detail: e.to_string() })?;
    fs::write(path, json.as_bytes()).map_err(|e| io_err(path, e))
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| DataError::Manifest { path: path.display().to_string(), detail: e.to_string() })
}
