//! Bit-exact persistence for checkpoints, learngene packs and teacher-logit
//! caches.
//!
//! Layout of a tensor file:
//!
//! ```text
//! "SWS1" | version: u32 LE | header_len: u64 LE | header (JSON) | payload
//! ```
//!
//! The header is a JSON object with sorted keys (`kind`, `metadata`,
//! `payload_len`, `tensors`), right-padded with spaces so the payload starts
//! on an 8-byte boundary. Each index entry gives `name`, `shape`, `offset`
//! and `length` in payload bytes. Tensors are raw `f32` LE values; every
//! tensor starts 8-byte aligned. There is no checksum: a corrupted payload
//! byte loads as a corrupted value.

mod artifacts;

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use artifacts::{load_checkpoint, load_logit_cache, load_pack, save_checkpoint, save_logit_cache, save_pack};

use crate::diffcore::Tensor;

pub const MAGIC: &[u8; 4] = b"SWS1";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 16;
const ALIGN: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a tensor file (magic {0:02x?})")]
    BadMagic(Vec<u8>),
    #[error("unsupported format version {0} (this build reads {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("file truncated: {have} bytes, {need} required")]
    Truncated { have: usize, need: usize },
    #[error("expected a {expected} file, found {found}")]
    WrongKind { expected: Kind, found: Kind },
    #[error("tensors {0} and {1} overlap in the payload")]
    Overlap(String, String),
    #[error("duplicate tensor name {0}")]
    DuplicateName(String),
    #[error("tensor {0} is not finite")]
    NonFinite(String),
    #[error("malformed tensor file: {0}")]
    Malformed(String),
}

/// Artifact discriminator stored in the header.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Checkpoint,
    Learngene,
    Logitcache,
}

impl std::fmt::Display for Kind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Kind::Checkpoint => "checkpoint",
            Kind::Learngene => "learngene",
            Kind::Logitcache => "logitcache",
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    kind: Kind,
    metadata: Value,
    payload_len: usize,
    tensors: Vec<IndexEntry>,
}

/// A decoded tensor file.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub kind: Kind,
    pub metadata: Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.metadata == other.metadata
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }
}

fn aligned(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Serializes to the on-disk byte layout.
pub fn encode(kind: Kind, tensors: &[(String, &Tensor<f32>)], metadata: &Value) -> Result<Vec<u8>, StoreError> {
    let mut seen = std::collections::HashSet::new();
    let mut index = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(StoreError::DuplicateName(name.clone()));
        }
        if !t.is_finite() {
            return Err(StoreError::NonFinite(name.clone()));
        }
        let length = t.numel() * 4;
        index.push(IndexEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            length,
        });
        offset += aligned(length);
    }
    let header = Header {
        kind,
        metadata: metadata.clone(),
        payload_len: offset,
        tensors: index,
    };
    // Round-tripping through Value sorts object keys.
    let value = serde_json::to_value(&header).map_err(|e| StoreError::Malformed(e.to_string()))?;
    let mut text = serde_json::to_string(&value).map_err(|e| StoreError::Malformed(e.to_string()))?;
    let padded = aligned(PREFIX_LEN + text.len()) - PREFIX_LEN;
    text.extend(std::iter::repeat_n(' ', padded - text.len()));

    let mut out = Vec::with_capacity(PREFIX_LEN + text.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for (_, t) in tensors {
        let start = out.len();
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.resize(start + aligned(out.len() - start), 0);
    }
    Ok(out)
}

/// Parses and validates a tensor file image.
pub fn decode(bytes: &[u8], expected: Kind) -> Result<TensorFile, StoreError> {
    let truncated = |need: usize| StoreError::Truncated {
        have: bytes.len(),
        need,
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(StoreError::BadMagic(bytes[..bytes.len().min(4)].to_vec()));
    }
    if bytes.len() < PREFIX_LEN {
        return Err(truncated(PREFIX_LEN));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let payload_start = usize::try_from(header_len)
        .ok()
        .and_then(|h| h.checked_add(PREFIX_LEN))
        .ok_or_else(|| StoreError::Malformed(format!("header length {header_len}")))?;
    if bytes.len() < payload_start {
        return Err(truncated(payload_start));
    }
    let text = std::str::from_utf8(&bytes[PREFIX_LEN..payload_start])
        .map_err(|e| StoreError::Malformed(format!("header is not UTF-8: {e}")))?;
    let header: Header = serde_json::from_str(text.trim_end_matches(' '))
        .map_err(|e| StoreError::Malformed(format!("header: {e}")))?;
    if header.kind != expected {
        return Err(StoreError::WrongKind {
            expected,
            found: header.kind,
        });
    }
    let need = payload_start
        .checked_add(header.payload_len)
        .ok_or_else(|| StoreError::Malformed("payload length overflows".into()))?;
    if bytes.len() < need {
        return Err(truncated(need));
    }
    if bytes.len() > need {
        return Err(StoreError::Malformed(format!(
            "{} trailing bytes after payload",
            bytes.len() - need
        )));
    }
    let payload = &bytes[payload_start..];

    let mut names = std::collections::HashSet::new();
    for e in &header.tensors {
        if !names.insert(e.name.as_str()) {
            return Err(StoreError::DuplicateName(e.name.clone()));
        }
        let numel = e.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        if numel.and_then(|n| n.checked_mul(4)) != Some(e.length) || e.length == 0 {
            return Err(StoreError::Malformed(format!(
                "{}: length {} does not match shape {:?}",
                e.name, e.length, e.shape
            )));
        }
        if e.offset % ALIGN != 0 {
            return Err(StoreError::Malformed(format!("{}: unaligned offset {}", e.name, e.offset)));
        }
        if e.offset.checked_add(e.length).is_none_or(|end| end > header.payload_len) {
            return Err(StoreError::Malformed(format!(
                "{}: [{}, +{}) outside payload of {} bytes",
                e.name, e.offset, e.length, header.payload_len
            )));
        }
    }
    let mut by_offset: Vec<&IndexEntry> = header.tensors.iter().collect();
    by_offset.sort_by_key(|e| e.offset);
    for w in by_offset.windows(2) {
        if w[0].offset + w[0].length > w[1].offset {
            return Err(StoreError::Overlap(w[0].name.clone(), w[1].name.clone()));
        }
    }

    let tensors = header
        .tensors
        .into_iter()
        .map(|e| {
            let data = payload[e.offset..e.offset + e.length]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(e.shape, data).map_err(|err| StoreError::Malformed(err.to_string()))?;
            Ok((e.name, t))
        })
        .collect::<Result<_, StoreError>>()?;
    Ok(TensorFile {
        kind: header.kind,
        metadata: header.metadata,
        tensors,
    })
}

/// Writes atomically: a temporary file in the target directory is renamed
/// over `path` once complete.
pub fn save(
    kind: Kind,
    tensors: &[(String, &Tensor<f32>)],
    metadata: &Value,
    path: impl AsRef<Path>,
) -> Result<(), StoreError> {
    let path = path.as_ref();
    let bytes = encode(kind, tensors, metadata)?;
    write_atomic(path, &bytes)
}

pub fn load(path: impl AsRef<Path>, expected: Kind) -> Result<TensorFile, StoreError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| io_err(path, source))?;
    decode(&bytes, expected)
}

fn io_err(path: &Path, source: std::io::Error) -> StoreError {
    StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Atomic replace of `path` with `bytes`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(path, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}
