//! Binary container shared by backbones, checkpoints, compressions and stores.
//!
//! Layout:
//!
//! ```text
//! "CMMR0001"                      8 bytes
//! metadata length                 u64 little-endian
//! metadata                        UTF-8 JSON
//! tensor payloads                 little-endian f32, in metadata order
//! SHA-256 of all preceding bytes  32 bytes
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CMMR0001";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload region.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    version: u32,
    role: String,
    tensors: Vec<TensorEntry>,
    hashes: BTreeMap<String, String>,
    #[serde(default)]
    extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub role: String,
    pub tensors: Vec<Tensor>,
    pub hashes: BTreeMap<String, String>,
    /// Role-specific metadata (configs, histories, manifests).
    pub extra: serde_json::Value,
}

impl Container {
    pub fn new(role: impl Into<String>) -> Self {
        Self { role: role.into(), tensors: Vec::new(), hashes: BTreeMap::new(), extra: serde_json::Value::Null }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(Tensor { name: name.into(), shape, data });
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|t| {
                let e = TensorEntry { name: t.name.clone(), shape: t.shape.clone(), offset };
                offset += t.data.len() * 4;
                e
            })
            .collect();
        let meta = Metadata {
            version: VERSION,
            role: self.role.clone(),
            tensors: entries,
            hashes: self.hashes.clone(),
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut out = Vec::with_capacity(16 + json.len() + offset + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Integrity { path: path.to_path_buf(), reason: reason.to_string() };
        if bytes.len() < 8 + 8 + 32 {
            return Err(bad("file truncated"));
        }
        if &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let meta_len = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        let meta_end = 16usize.checked_add(meta_len).filter(|e| *e <= body.len()).ok_or_else(|| bad("metadata overruns file"))?;
        let meta: Metadata = serde_json::from_slice(&body[16..meta_end]).map_err(|e| bad(&format!("metadata: {e}")))?;
        if meta.version != VERSION {
            return Err(Error::Version { found: meta.version, expected: VERSION });
        }
        let payload = &body[meta_end..];
        let mut expected = 0;
        let mut tensors = Vec::with_capacity(meta.tensors.len());
        for e in &meta.tensors {
            if e.offset != expected {
                return Err(bad(&format!("tensor {} at unexpected offset", e.name)));
            }
            let n: usize = e.shape.iter().product();
            let end = e.offset + n * 4;
            if end > payload.len() {
                return Err(bad(&format!("tensor {} overruns payload", e.name)));
            }
            let data = payload[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor { name: e.name.clone(), shape: e.shape.clone(), data });
            expected = end;
        }
        if expected != payload.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self { role: meta.role, tensors, hashes: meta.hashes, extra: meta.extra })
    }

    /// Writes via a temporary file, fsync and rename, so readers never see a
    /// partial container.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn expect_role(&self, role: &str, path: &Path) -> Result<()> {
        if self.role != role {
            return Err(Error::Integrity {
                path: path.to_path_buf(),
                reason: format!("expected role {role}, found {}", self.role),
            });
        }
        Ok(())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("checkpoint");
        c.push("a", vec![2, 2], vec![1.0, -2.0, 3.5, 0.0]);
        c.push("b", vec![3], vec![f32::MIN_POSITIVE, 7.0, -0.0]);
        c.hashes.insert("backbone".into(), "abc".into());
        c.extra = serde_json::json!({"m": 4, "history": [1.5, 1.25]});
        c
    }

    #[test]
    fn layout_starts_with_magic_and_length() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..8], b"CMMR0001");
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let meta: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        assert_eq!(meta["version"], 1);
        assert_eq!(meta["tensors"][1]["offset"], 16);
        assert_eq!(bytes.len(), 16 + len + 7 * 4 + 32);
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.tensors[1].data[2].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn tampering_and_truncation_are_detected() {
        let mut bytes = sample().to_bytes();
        let n = bytes.len();
        bytes[n - 40] ^= 1;
        assert!(matches!(Container::from_bytes(&bytes, Path::new("x")), Err(Error::Integrity { .. })));
        let bytes = sample().to_bytes();
        assert!(matches!(Container::from_bytes(&bytes[..bytes.len() - 5], Path::new("x")), Err(Error::Integrity { .. })));
    }

    #[test]
    fn version_mismatch() {
        let c = sample();
        let bytes = c.to_bytes();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = String::from_utf8(bytes[16..16 + len].to_vec()).unwrap().replace("\"version\":1", "\"version\":9");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        out.extend_from_slice(&bytes[16 + len..bytes.len() - 32]);
        let d = Sha256::digest(&out);
        out.extend_from_slice(&d);
        assert!(matches!(Container::from_bytes(&out, Path::new("x")), Err(Error::Version { found: 9, .. })));
    }
}
