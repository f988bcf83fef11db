//! `.dvc` checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! [0..8)    magic "DVCKPT01"
//! [8..16)   u64 header length H
//! [16..16+H) UTF-8 JSON header {"version", "metadata", "index"}
//! [16+H..)  raw f32 payloads, one per index record, in lexicographic name order
//! ```
//!
//! Index offsets are relative to the start of the payload region. The content
//! hash is SHA-256 over the entire file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Kind, NamedTensorSet, Tensor};

pub const MAGIC: &[u8; 8] = b"DVCKPT01";
pub const VERSION: u64 = 1;
pub const EXTENSION: &str = "dvc";
const DTYPE_F32: &str = "f32";

pub type Metadata = BTreeMap<String, String>;

/// 32-byte SHA-256 digest of a checkpoint file.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentHash(pub [u8; 32]);

impl ContentHash {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        ContentHash(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentHash({})", self.to_hex())
    }
}

impl FromStr for ContentHash {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)
            .map_err(|e| Error::CorruptFile(format!("bad hash `{s}`: {e}")))?;
        Ok(ContentHash(out))
    }
}

/// One tensor record of the header index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexRecord {
    pub name: String,
    pub kind: String,
    pub dtype: String,
    pub shape: Vec<u64>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u64,
    pub metadata: Metadata,
    pub index: Vec<IndexRecord>,
}

/// Serializes a set into the canonical container bytes.
pub fn encode(set: &NamedTensorSet, metadata: &Metadata) -> Vec<u8> {
    let mut offset = 0u64;
    let index = set
        .iter()
        .map(|(name, entry)| {
            let length = 4 * entry.tensor.len() as u64;
            let rec = IndexRecord {
                name: name.to_owned(),
                kind: entry.kind.as_str().to_owned(),
                dtype: DTYPE_F32.to_owned(),
                shape: entry.tensor.shape().iter().map(|&d| d as u64).collect(),
                offset,
                length,
            };
            offset += length;
            rec
        })
        .collect();
    let header = CheckpointHeader {
        version: VERSION,
        metadata: metadata.clone(),
        index,
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serialization is infallible");

    let mut out = Vec::with_capacity(16 + header_bytes.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, entry) in set.iter() {
        for v in entry.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses container bytes. Every length is validated against the buffer
/// before use.
pub fn decode(bytes: &[u8]) -> Result<(NamedTensorSet, Metadata)> {
    if bytes.len() < 16 {
        return Err(Error::CorruptFile(format!(
            "file is {} bytes, shorter than the fixed preamble",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::CorruptFile("bad magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let rest = &bytes[16..];
    if header_len > rest.len() as u64 {
        return Err(Error::CorruptFile(format!(
            "header length {header_len} exceeds remaining {} bytes",
            rest.len()
        )));
    }
    let (header_bytes, payload) = rest.split_at(header_len as usize);
    let value: serde_json::Value = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::CorruptFile(format!("header is not valid JSON: {e}")))?;
    match value.get("version").and_then(serde_json::Value::as_u64) {
        Some(VERSION) => {}
        Some(v) => return Err(Error::VersionUnsupported(v)),
        None => return Err(Error::CorruptFile("header has no version".into())),
    }
    let header: CheckpointHeader = serde_json::from_value(value)
        .map_err(|e| Error::CorruptFile(format!("malformed header: {e}")))?;

    let mut set = NamedTensorSet::new();
    let mut prev_name: Option<&str> = None;
    let mut prev_end = 0u64;
    for rec in &header.index {
        if let Some(prev) = prev_name {
            if rec.name.as_str() <= prev {
                return Err(Error::CorruptFile(format!(
                    "index not in strictly ascending name order at `{}`",
                    rec.name
                )));
            }
        }
        prev_name = Some(&rec.name);
        let kind = Kind::parse(&rec.kind)
            .ok_or_else(|| Error::CorruptFile(format!("unknown kind `{}`", rec.kind)))?;
        if rec.dtype != DTYPE_F32 {
            return Err(Error::CorruptFile(format!(
                "unsupported dtype `{}`",
                rec.dtype
            )));
        }
        if rec.shape.is_empty() || rec.shape.contains(&0) {
            return Err(Error::CorruptFile(format!(
                "`{}` has invalid shape {:?}",
                rec.name, rec.shape
            )));
        }
        let numel = rec
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .filter(|n| *n <= usize::MAX as u64 / 4)
            .ok_or_else(|| Error::CorruptFile(format!("`{}` shape overflows", rec.name)))?;
        if rec.length != 4 * numel {
            return Err(Error::CorruptFile(format!(
                "`{}` declares {} bytes but shape needs {}",
                rec.name,
                rec.length,
                4 * numel
            )));
        }
        if rec.offset < prev_end {
            return Err(Error::CorruptFile(format!(
                "`{}` overlaps the previous payload",
                rec.name
            )));
        }
        let end = rec
            .offset
            .checked_add(rec.length)
            .filter(|&e| e <= payload.len() as u64)
            .ok_or_else(|| Error::CorruptFile(format!("`{}` payload is truncated", rec.name)))?;
        prev_end = end;

        let raw = &payload[rec.offset as usize..end as usize];
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let shape = rec.shape.iter().map(|&d| d as usize).collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::CorruptFile(format!("`{}`: {e}", rec.name)))?;
        set.insert(rec.name.clone(), tensor, kind);
    }
    if prev_end != payload.len() as u64 {
        return Err(Error::CorruptFile(format!(
            "{} trailing bytes after the last payload",
            payload.len() as u64 - prev_end
        )));
    }
    Ok((set, header.metadata))
}

/// Writes `set` to `path` and returns the SHA-256 of the written file.
pub fn write_checkpoint(
    set: &NamedTensorSet,
    metadata: &Metadata,
    path: impl AsRef<Path>,
) -> Result<ContentHash> {
    let path = path.as_ref();
    let bytes = encode(set, metadata);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(ContentHash::of_bytes(&bytes))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(NamedTensorSet, Metadata)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Reads a checkpoint together with the hash of its bytes.
pub fn read_checkpoint_hashed(
    path: impl AsRef<Path>,
) -> Result<(NamedTensorSet, Metadata, ContentHash)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let hash = ContentHash::of_bytes(&bytes);
    let (set, meta) = decode(&bytes)?;
    Ok((set, meta, hash))
}

pub fn content_hash(path: impl AsRef<Path>) -> Result<ContentHash> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(ContentHash::of_bytes(&bytes))
}

/// Hash of the canonical encoding of a set with empty metadata.
pub fn fingerprint(set: &NamedTensorSet) -> ContentHash {
    ContentHash::of_bytes(&encode(set, &Metadata::new()))
}
