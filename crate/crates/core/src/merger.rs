//! Merging per-document compressions, plus a file-backed per-user store that
//! keeps a running mean under single-document updates.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compressor::{Compression, Compressor};
use crate::container::{sha256_hex, write_atomic, Container};
use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::ParamStore;
use crate::tokenizer::{encode, SEP};

/// Element-wise mean of single-document compressions, accumulated in `f64`
/// in list order.
pub fn merge_mean(compressions: &[Compression]) -> Result<Compression> {
    let first = compressions.first().ok_or_else(|| Error::contract("merge_mean of an empty list"))?;
    for (i, c) in compressions.iter().enumerate() {
        if c.shape() != first.shape() {
            return Err(Error::contract(format!(
                "compression {i} has shape {:?}, expected {:?}",
                c.shape(),
                first.shape()
            )));
        }
        if c.doc_count != 1 {
            return Err(Error::contract(format!("compression {i} already merges {} documents", c.doc_count)));
        }
    }
    let parts: Vec<&[f32]> = compressions.iter().map(|c| c.matrix.as_slice()).collect();
    Compression::new(kernels::mean_of(&parts), first.m, first.d, compressions.len())
}

/// Row-wise concatenation; the result has `Σ m_i` rows.
pub fn merge_concat(compressions: &[Compression]) -> Result<Compression> {
    let first = compressions.first().ok_or_else(|| Error::contract("merge_concat of an empty list"))?;
    let mut matrix = Vec::new();
    let mut rows = 0;
    let mut docs = 0;
    for (i, c) in compressions.iter().enumerate() {
        if c.d != first.d {
            return Err(Error::contract(format!("compression {i} has width {}, expected {}", c.d, first.d)));
        }
        matrix.extend_from_slice(&c.matrix);
        rows += c.m;
        docs += c.doc_count;
    }
    Compression::new(matrix, rows, first.d, docs)
}

/// Token ids of documents joined by `SEP`; a single document gets no separator.
pub fn join_docs(docs: &[String]) -> Vec<u32> {
    let mut ids = Vec::new();
    for (i, d) in docs.iter().enumerate() {
        if i > 0 {
            ids.push(SEP);
        }
        ids.extend(encode(d, false, false));
    }
    ids
}

/// Compresses the `SEP`-joined concatenation of `docs` in one pass.
pub fn compress_concat_docs(compressor: &Compressor, store: &ParamStore<f32>, docs: &[String]) -> Result<Compression> {
    if docs.is_empty() {
        return Err(Error::contract("compress_concat_docs of an empty list"));
    }
    compressor.compress_encoded(store, &join_docs(docs), docs.len())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the document text.
    pub hash: String,
    /// Set when the same content was already present.
    #[serde(default)]
    pub duplicate: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub user_id: String,
    pub n: usize,
    pub version: u64,
    pub hashes: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreOrigin {
    pub backbone_hash: String,
    pub checkpoint_hash: String,
}

/// Running mean of a user's document compressions.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionStore {
    pub user_id: String,
    pub m: usize,
    pub d: usize,
    mean: Vec<f64>,
    pub provenance: Vec<Provenance>,
    pub version: u64,
    /// Document texts, retained only in audit mode.
    pub texts: Option<Vec<String>>,
    pub origin: StoreOrigin,
}

impl CompressionStore {
    pub fn new(user_id: impl Into<String>, m: usize, d: usize, retain_text: bool, origin: StoreOrigin) -> Self {
        Self {
            user_id: user_id.into(),
            m,
            d,
            mean: vec![0.0; m * d],
            provenance: Vec::new(),
            version: 0,
            texts: retain_text.then(Vec::new),
            origin,
        }
    }

    pub fn doc_count(&self) -> usize {
        self.provenance.len()
    }

    /// Folds one document's compression into the mean:
    /// `aggregate ← (n·aggregate + c) / (n + 1)`.
    pub fn add(&mut self, c: &Compression, doc: &str) -> Result<()> {
        if c.shape() != (self.m, self.d) {
            return Err(Error::contract(format!(
                "compression shape {:?} does not match store shape {:?}",
                c.shape(),
                (self.m, self.d)
            )));
        }
        if c.doc_count != 1 {
            return Err(Error::contract("store updates take single-document compressions"));
        }
        let n = self.doc_count() as f64;
        for (a, &v) in self.mean.iter_mut().zip(&c.matrix) {
            *a = (n * *a + v as f64) / (n + 1.0);
        }
        let hash = sha256_hex(doc.as_bytes());
        let duplicate = self.provenance.iter().any(|p| p.hash == hash);
        if duplicate {
            log::warn!("user {}: document {} added again", self.user_id, &hash[..12]);
        }
        self.provenance.push(Provenance { hash, duplicate });
        if let Some(t) = self.texts.as_mut() {
            t.push(doc.to_owned());
        }
        self.version += 1;
        Ok(())
    }

    pub fn aggregate(&self) -> Option<Compression> {
        if self.provenance.is_empty() {
            return None;
        }
        let m = self.mean.iter().map(|&v| v as f32).collect();
        Compression::new(m, self.m, self.d, self.doc_count()).ok()
    }

    pub fn manifest(&self) -> StoreManifest {
        StoreManifest {
            user_id: self.user_id.clone(),
            n: self.doc_count(),
            version: self.version,
            hashes: self.provenance.iter().map(|p| p.hash.clone()).collect(),
        }
    }

    /// Recompresses the retained texts and returns the largest absolute
    /// difference between their batch mean and the stored aggregate.
    pub fn audit(&self, compressor: &Compressor, store: &ParamStore<f32>) -> Result<f64> {
        let texts = self
            .texts
            .as_ref()
            .ok_or_else(|| Error::Config(format!("store for {} does not retain document text", self.user_id)))?;
        let agg = self.aggregate().ok_or_else(|| Error::contract("audit of an empty store"))?;
        for (t, p) in texts.iter().zip(&self.provenance) {
            if sha256_hex(t.as_bytes()) != p.hash {
                return Err(Error::Integrity { path: PathBuf::from(&self.user_id), reason: "retained text does not match its hash".into() });
            }
        }
        let batch = merge_mean(&compressor.compress_batch(store, texts)?)?;
        Ok(batch.matrix.iter().zip(&agg.matrix).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max))
    }

    fn to_container(&self) -> Container {
        let mut c = Container::new("store");
        let hi: Vec<f32> = self.mean.iter().map(|&v| v as f32).collect();
        let lo: Vec<f32> = self.mean.iter().zip(&hi).map(|(&v, &h)| (v - h as f64) as f32).collect();
        c.push("aggregate", vec![self.m, self.d], hi);
        c.push("aggregate_residual", vec![self.m, self.d], lo);
        c.hashes.insert("backbone".into(), self.origin.backbone_hash.clone());
        c.hashes.insert("checkpoint".into(), self.origin.checkpoint_hash.clone());
        c.extra = serde_json::json!({
            "user_id": self.user_id,
            "m": self.m,
            "d_model": self.d,
            "doc_count": self.doc_count(),
            "version": self.version,
            "provenance": self.provenance,
            "texts": self.texts,
        });
        c
    }

    fn from_container(c: &Container, path: &Path) -> Result<Self> {
        c.expect_role("store", path)?;
        let bad = |reason: &str| Error::Integrity { path: path.to_path_buf(), reason: reason.into() };
        let hi = c.tensor("aggregate").ok_or_else(|| bad("missing aggregate"))?;
        let lo = c.tensor("aggregate_residual").ok_or_else(|| bad("missing aggregate residual"))?;
        if hi.shape.len() != 2 || hi.shape != lo.shape {
            return Err(bad("aggregate shape"));
        }
        let e = &c.extra;
        let provenance: Vec<Provenance> = serde_json::from_value(e["provenance"].clone())?;
        if e["doc_count"].as_u64() != Some(provenance.len() as u64) {
            return Err(bad("document count disagrees with provenance"));
        }
        Ok(Self {
            user_id: e["user_id"].as_str().ok_or_else(|| bad("missing user id"))?.to_owned(),
            m: hi.shape[0],
            d: hi.shape[1],
            mean: hi.data.iter().zip(&lo.data).map(|(&h, &l)| h as f64 + l as f64).collect(),
            provenance,
            version: e["version"].as_u64().ok_or_else(|| bad("missing version"))?,
            texts: serde_json::from_value(e["texts"].clone())?,
            origin: StoreOrigin {
                backbone_hash: c.hashes.get("backbone").cloned().unwrap_or_default(),
                checkpoint_hash: c.hashes.get("checkpoint").cloned().unwrap_or_default(),
            },
        })
    }
}

/// On-disk layout of one user's store: `<root>/<user_id>/{aggregate.bin, manifest.json}`.
#[derive(Debug, Clone)]
pub struct StoreDir {
    pub dir: PathBuf,
}

struct WriteLock(PathBuf);

impl Drop for WriteLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

impl StoreDir {
    pub fn new(root: &Path, user_id: &str) -> Result<Self> {
        if user_id.is_empty() || user_id.contains(['/', '\\']) || user_id.starts_with('.') {
            return Err(Error::contract(format!("user id {user_id:?} is not a valid directory name")));
        }
        Ok(Self { dir: root.join(user_id) })
    }

    fn aggregate_path(&self) -> PathBuf {
        self.dir.join("aggregate.bin")
    }

    fn manifest_path(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }

    pub fn exists(&self) -> bool {
        self.aggregate_path().exists()
    }

    /// Reads the store and checks the manifest agrees with the aggregate.
    pub fn load(&self) -> Result<CompressionStore> {
        let path = self.aggregate_path();
        let store = CompressionStore::from_container(&Container::read(&path)?, &path)?;
        let mpath = self.manifest_path();
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: StoreManifest = serde_json::from_str(&text)?;
        if manifest != store.manifest() {
            return Err(Error::Integrity { path: mpath, reason: "manifest disagrees with aggregate".into() });
        }
        Ok(store)
    }

    pub fn save(&self, store: &CompressionStore) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        write_atomic(&self.aggregate_path(), &store.to_container().to_bytes())?;
        let manifest = serde_json::to_vec_pretty(&store.manifest())?;
        write_atomic(&self.manifest_path(), &manifest)
    }

    fn lock(&self) -> Result<WriteLock> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let path = self.dir.join(".lock");
        OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::Config(format!("store {} is locked by another writer", self.dir.display()))
            } else {
                Error::io(&path, e)
            }
        })?;
        Ok(WriteLock(path))
    }

    /// Adds one document under the writer lock; the update is on disk before
    /// this returns.
    pub fn add(
        &self,
        c: &Compression,
        doc: &str,
        init: impl FnOnce() -> CompressionStore,
    ) -> Result<CompressionStore> {
        let _lock = self.lock()?;
        let mut store = if self.exists() { self.load()? } else { init() };
        store.add(c, doc)?;
        self.save(&store)?;
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn comp(vals: &[f32]) -> Compression {
        Compression::new(vals.to_vec(), 1, vals.len(), 1).unwrap()
    }

    #[test]
    fn mean_of_one_is_identity() {
        let c = comp(&[0.1, -2.5, 3.0]);
        assert_eq!(merge_mean(std::slice::from_ref(&c)).unwrap().matrix, c.matrix);
    }

    #[test]
    fn opposite_compressions_cancel() {
        let a = comp(&[0.1, -2.5, 3.0]);
        let b = comp(&[-0.1, 2.5, -3.0]);
        let m = merge_mean(&[a, b]).unwrap();
        assert!(m.matrix.iter().all(|&v| v == 0.0));
        assert_eq!(m.doc_count, 2);
    }

    #[test]
    fn empty_and_mismatched_lists_are_rejected() {
        assert!(matches!(merge_mean(&[]), Err(Error::Contract(_))));
        assert!(matches!(merge_mean(&[comp(&[1.0]), comp(&[1.0, 2.0])]), Err(Error::Contract(_))));
        assert!(matches!(merge_concat(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn concat_stacks_rows() {
        let a = Compression::new(vec![1.0; 8], 4, 2, 1).unwrap();
        let b = Compression::new(vec![2.0; 8], 4, 2, 1).unwrap();
        let c = merge_concat(&[a.clone(), b.clone()]).unwrap();
        assert_eq!((c.m, c.d, c.doc_count), (8, 2, 2));
        assert_eq!(&c.matrix[..8], &a.matrix[..]);
        assert_eq!(&c.matrix[8..], &b.matrix[..]);
        assert_eq!(merge_concat(std::slice::from_ref(&a)).unwrap(), a);
    }

    #[test]
    fn join_docs_inserts_separators_between_documents_only() {
        assert_eq!(join_docs(&["ab".into()]), vec![97, 98]);
        assert_eq!(join_docs(&["a".into(), "b".into()]), vec![97, SEP, 98]);
    }

    #[test]
    fn store_two_point_mean_and_duplicates() {
        let mut s = CompressionStore::new("u", 1, 2, false, StoreOrigin::default());
        assert!(s.aggregate().is_none());
        s.add(&comp(&[1.0, 2.0]), "a").unwrap();
        assert_eq!(s.aggregate().unwrap().matrix, vec![1.0, 2.0]);
        s.add(&comp(&[3.0, 6.0]), "b").unwrap();
        assert_eq!(s.aggregate().unwrap().matrix, vec![2.0, 4.0]);
        s.add(&comp(&[2.0, 4.0]), "a").unwrap();
        assert_eq!(s.doc_count(), 3);
        assert!(s.provenance[2].duplicate && !s.provenance[1].duplicate);
        assert_eq!(s.version, 3);
        assert!(s.add(&comp(&[1.0]), "c").is_err());
    }

    #[test]
    fn store_survives_disk_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = StoreDir::new(tmp.path(), "alice").unwrap();
        let init = || CompressionStore::new("alice", 1, 3, true, StoreOrigin::default());
        dir.add(&comp(&[0.1, 0.2, 0.3]), "x", init).unwrap();
        let s = dir.add(&comp(&[0.7, 0.5, 0.3]), "y", init).unwrap();
        let back = dir.load().unwrap();
        assert_eq!(back, s);
        assert_eq!(back.texts.as_deref(), Some(&["x".to_string(), "y".to_string()][..]));
        assert!(!dir.dir.join(".lock").exists());
    }

    #[test]
    fn stale_manifest_is_detected() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = StoreDir::new(tmp.path(), "bob").unwrap();
        let init = || CompressionStore::new("bob", 1, 1, false, StoreOrigin::default());
        dir.add(&comp(&[1.0]), "x", init).unwrap();
        let old = fs::read(dir.manifest_path()).unwrap();
        dir.add(&comp(&[2.0]), "y", init).unwrap();
        fs::write(dir.manifest_path(), old).unwrap();
        assert!(matches!(dir.load(), Err(Error::Integrity { .. })));
    }

    #[test]
    fn concurrent_writer_is_refused() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = StoreDir::new(tmp.path(), "carol").unwrap();
        let _held = dir.lock().unwrap();
        let init = || CompressionStore::new("carol", 1, 1, false, StoreOrigin::default());
        assert!(matches!(dir.add(&comp(&[1.0]), "x", init), Err(Error::Config(_))));
    }

    #[test]
    fn bad_user_ids_are_rejected() {
        for id in ["", "../x", "a/b", ".hidden"] {
            assert!(StoreDir::new(Path::new("/tmp"), id).is_err());
        }
    }
}
