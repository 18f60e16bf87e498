//! Dataset persistence (versioned JSON manifest plus a raw little-endian
//! f32 blob), and difference-hash deduplication.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datagen::{Dataset, Sample};
use crate::feature_matrix::FeatureSet;

pub const MANIFEST_VERSION: &str = "v1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "images.f32";

/// Guard against absurd allocations when reading untrusted manifests.
const MAX_BLOB_BYTES: u64 = 1 << 30;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("manifest version {0:?} is not supported (expected {MANIFEST_VERSION:?})")]
    VersionMismatch(String),
    #[error("failed to parse manifest: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("blob checksum mismatch (manifest {expected}, blob {actual})")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("record {id:?}: {message}")]
    BadRecord { id: String, message: String },
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("records overlap or leave the blob bounds")]
    BadOffsets,
    #[error("blob is truncated: {expected} bytes expected, {actual} present")]
    TruncatedBlob { expected: u64, actual: u64 },
    #[error("blob exceeds the size limit")]
    BlobTooLarge,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub label: String,
    pub features: Vec<String>,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Byte length within the blob.
    pub len: u64,
    /// Image dims [height, width, channels].
    pub dims: [usize; 3],
}

/// Index of a stored dataset, tying the blob to a vocabulary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub vocabulary_hash: String,
    pub blob_checksum: String,
    pub records: Vec<ManifestRecord>,
}

fn checksum(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Serialize a dataset to (manifest JSON, blob bytes).
pub fn encode_dataset(data: &Dataset) -> (String, Vec<u8>) {
    let mut blob = Vec::new();
    let mut records = Vec::with_capacity(data.samples.len());
    for s in &data.samples {
        let offset = blob.len() as u64;
        for &p in &s.pixels {
            blob.extend_from_slice(&p.to_le_bytes());
        }
        records.push(ManifestRecord {
            id: s.id.clone(),
            label: s.label.clone(),
            features: s.truth_features.iter().map(str::to_string).collect(),
            offset,
            len: (s.pixels.len() * 4) as u64,
            dims: [s.height, s.width, s.channels],
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION.to_string(),
        vocabulary_hash: data.vocab_hash.clone(),
        blob_checksum: checksum(&blob),
        records,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    (json, blob)
}

/// Parse and structurally validate a manifest document.
pub fn parse_manifest(json: &str) -> Result<Manifest, IngestError> {
    let manifest: Manifest = serde_json::from_str(json)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(IngestError::VersionMismatch(manifest.version));
    }
    let mut ids = HashSet::new();
    let mut spans: Vec<(u64, u64)> = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        if !ids.insert(rec.id.clone()) {
            return Err(IngestError::DuplicateId(rec.id.clone()));
        }
        let [h, w, c] = rec.dims;
        let pixels = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(c))
            .ok_or_else(|| IngestError::BadRecord {
                id: rec.id.clone(),
                message: "dims overflow".into(),
            })?;
        if pixels == 0 {
            return Err(IngestError::BadRecord { id: rec.id.clone(), message: "empty dims".into() });
        }
        if rec.len != (pixels as u64) * 4 {
            return Err(IngestError::BadRecord {
                id: rec.id.clone(),
                message: format!("len {} does not match dims {:?}", rec.len, rec.dims),
            });
        }
        let end = rec.offset.checked_add(rec.len).ok_or(IngestError::BadOffsets)?;
        if end > MAX_BLOB_BYTES {
            return Err(IngestError::BlobTooLarge);
        }
        spans.push((rec.offset, end));
    }
    spans.sort_unstable();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(IngestError::BadOffsets);
        }
    }
    Ok(manifest)
}

/// Reconstruct a dataset from a validated manifest and its blob.
pub fn decode_dataset(manifest: &Manifest, blob: &[u8]) -> Result<Dataset, IngestError> {
    let needed = manifest.records.iter().map(|r| r.offset + r.len).max().unwrap_or(0);
    if (blob.len() as u64) < needed {
        return Err(IngestError::TruncatedBlob { expected: needed, actual: blob.len() as u64 });
    }
    let actual = checksum(blob);
    if actual != manifest.blob_checksum {
        return Err(IngestError::ChecksumMismatch {
            expected: manifest.blob_checksum.clone(),
            actual,
        });
    }
    let mut samples = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        let bytes = &blob[rec.offset as usize..(rec.offset + rec.len) as usize];
        let pixels: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        samples.push(Sample {
            id: rec.id.clone(),
            label: rec.label.clone(),
            truth_features: FeatureSet::from_validated(
                rec.features.iter().map(|f| crate::feature_matrix::normalize(f)).collect(),
            ),
            height: rec.dims[0],
            width: rec.dims[1],
            channels: rec.dims[2],
            pixels,
        });
    }
    Ok(Dataset { samples, vocab_hash: manifest.vocabulary_hash.clone() })
}

/// Write `manifest.json` and `images.f32` under `dir`.
pub fn save_dataset(data: &Dataset, dir: impl AsRef<Path>) -> Result<(), IngestError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let (json, blob) = encode_dataset(data);
    std::fs::File::create(dir.join(MANIFEST_FILE))?.write_all(json.as_bytes())?;
    std::fs::File::create(dir.join(BLOB_FILE))?.write_all(&blob)?;
    Ok(())
}

/// Load a dataset saved by [`save_dataset`], verifying the checksum.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset, IngestError> {
    let dir = dir.as_ref();
    let json = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest = parse_manifest(&json)?;
    let mut blob = Vec::new();
    std::fs::File::open(dir.join(BLOB_FILE))?.read_to_end(&mut blob)?;
    decode_dataset(&manifest, &blob)
}

/// 64-bit difference hash of a downscaled grayscale image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PerceptualHash {
    pub bits: u64,
}

impl PerceptualHash {
    pub fn hamming(self, other: PerceptualHash) -> u32 {
        (self.bits ^ other.bits).count_ones()
    }
}

/// Difference hash: mean-pool to 9×8 grayscale, set one bit per horizontal
/// gradient. Invariant to global brightness shifts.
pub fn dhash(sample: &Sample) -> PerceptualHash {
    const COLS: usize = 9;
    const ROWS: usize = 8;
    let mut pooled = [[0.0f64; COLS]; ROWS];
    for r in 0..ROWS {
        let y0 = r * sample.height / ROWS;
        let y1 = ((r + 1) * sample.height / ROWS).max(y0 + 1).min(sample.height.max(1));
        for c in 0..COLS {
            let x0 = c * sample.width / COLS;
            let x1 = ((c + 1) * sample.width / COLS).max(x0 + 1).min(sample.width.max(1));
            let mut sum = 0.0;
            let mut count = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    // Channel-mean grayscale.
                    let base = (y * sample.width + x) * sample.channels;
                    let mut px = 0.0;
                    for ch in 0..sample.channels {
                        px += sample.pixels.get(base + ch).copied().unwrap_or(0.0) as f64;
                    }
                    sum += px / sample.channels.max(1) as f64;
                    count += 1.0;
                }
            }
            pooled[r][c] = if count > 0.0 { sum / count } else { 0.0 };
        }
    }
    let mut bits = 0u64;
    let mut bit = 0;
    for row in pooled.iter() {
        for c in 0..COLS - 1 {
            if row[c] < row[c + 1] {
                bits |= 1 << bit;
            }
            bit += 1;
        }
    }
    PerceptualHash { bits }
}

/// Remove from `a` every sample whose hash is within `max_hamming` of any
/// hash in `b`.
pub fn dedup(a: &Dataset, b: &Dataset, max_hamming: u32) -> Dataset {
    let reference: Vec<PerceptualHash> = b.samples.iter().map(dhash).collect();
    let samples = a
        .samples
        .iter()
        .filter(|s| {
            let h = dhash(s);
            !reference.iter().any(|r| h.hamming(*r) <= max_hamming)
        })
        .cloned()
        .collect();
    Dataset { samples, vocab_hash: a.vocab_hash.clone() }
}
