//! Tensor archives: a directory holding one raw little-endian `f32` file per
//! tensor plus a `manifest.json` describing names, shapes and metadata.
//!
//! ```text
//! ckpt/
//!   manifest.json
//!   mapping.0.weight.bin
//!   ...
//! ```
//!
//! The manifest is readable on its own; tensor payloads are only touched by
//! [`read_archive`].

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "bdinvert-archive";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub kind: String,
    /// Digest over every tensor digest in order; identifies the payload.
    pub checksum: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Archive {
    pub manifest: Manifest,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Archive {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Look up a tensor and check its shape.
    pub fn expect(&self, name: &str, shape: &[usize], path: &Path) -> Result<Tensor<f32>> {
        let t = self.get(name).ok_or_else(|| Error::Incompatible {
            path: path.to_path_buf(),
            reason: format!("missing tensor {name}"),
        })?;
        if t.shape() != shape {
            return Err(Error::Incompatible {
                path: path.to_path_buf(),
                reason: format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape()),
            });
        }
        Ok(t.clone())
    }
}

fn to_bytes(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn combined_checksum(entries: &[TensorEntry]) -> String {
    let mut h = Sha256::new();
    for e in entries {
        h.update(e.name.as_bytes());
        h.update(e.sha256.as_bytes());
    }
    hex(&h.finalize())
}

/// Checksum an in-memory tensor list exactly as [`write_archive`] would.
pub fn checksum_of(tensors: &[(String, Tensor<f32>)]) -> String {
    let entries: Vec<TensorEntry> = tensors
        .iter()
        .map(|(name, t)| TensorEntry {
            name: name.clone(),
            file: String::new(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            sha256: sha256_hex(&to_bytes(t)),
        })
        .collect();
    combined_checksum(&entries)
}

fn file_name(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{safe}.bin")
}

/// Write an archive. The directory is created if needed; the manifest is
/// written last via a temporary file so readers never see a partial archive.
pub fn write_archive(
    dir: &Path,
    kind: &str,
    meta: serde_json::Value,
    tensors: &[(String, Tensor<f32>)],
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let bytes = to_bytes(t);
        let file = file_name(name);
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(TensorEntry {
            name: name.clone(),
            file,
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        kind: kind.into(),
        checksum: combined_checksum(&entries),
        meta,
        tensors: entries,
    };
    let tmp = dir.join(".manifest.json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&tmp, e))?;
    let dst = dir.join(MANIFEST);
    fs::rename(&tmp, &dst).map_err(|e| Error::io(&dst, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::Malformed {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if m.format != FORMAT || m.version != VERSION {
        return Err(Error::Incompatible {
            path,
            reason: format!("unsupported archive format {} v{}", m.format, m.version),
        });
    }
    Ok(m)
}

pub fn read_archive(dir: &Path) -> Result<Archive> {
    let manifest = read_manifest(dir)?;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let path: PathBuf = dir.join(&e.file);
        if e.dtype != "f32" {
            return Err(Error::Incompatible {
                path,
                reason: format!("unsupported dtype {}", e.dtype),
            });
        }
        let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
        let n: usize = e.shape.iter().product();
        if bytes.len() != n * 4 {
            return Err(Error::Malformed {
                path,
                reason: format!("expected {} bytes, found {}", n * 4, bytes.len()),
            });
        }
        if sha256_hex(&bytes) != e.sha256 {
            return Err(Error::Malformed {
                path,
                reason: "checksum mismatch".into(),
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((e.name.clone(), Tensor::new(&e.shape, data)));
    }
    Ok(Archive { manifest, tensors })
}
