//! Content-addressed evaluation cache.
//!
//! Keys are SHA-256 digests over the canonical JSON of the candidate text,
//! the example (id + payload), and the evaluator identity and version. Values
//! are the canonical `EvaluationRecord` produced on the first computation.
//! An in-memory map fronts an optional on-disk store laid out as
//! `<root>/<hex[0..2]>/<hex[2..4]>/<hex>.json`.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::model::{EvaluationRecord, Example};

use super::EvaluatorIdentity;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey {
    digest: String,
}

#[derive(Serialize)]
struct KeyMaterial<'a> {
    candidate_text: &'a str,
    example_id: Option<&'a str>,
    example_payload: Option<&'a serde_json::Value>,
    evaluator_name: &'a str,
    evaluator_version: &'a str,
}

impl CacheKey {
    pub fn new(candidate_text: &str, example: Option<&Example>, evaluator: &EvaluatorIdentity) -> Self {
        let material = KeyMaterial {
            candidate_text,
            example_id: example.map(|e| e.id.as_str()),
            example_payload: example.map(|e| &e.payload),
            evaluator_name: &evaluator.name,
            evaluator_version: &evaluator.version,
        };
        let bytes = serde_json::to_vec(&material).expect("key material serializes");
        Self {
            digest: hex::encode(Sha256::digest(&bytes)),
        }
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    fn relative_path(&self) -> PathBuf {
        let d = &self.digest;
        PathBuf::from(&d[0..2]).join(&d[2..4]).join(format!("{d}.json"))
    }
}

#[derive(Debug, Default)]
pub struct EvaluationCache {
    memory: RwLock<HashMap<CacheKey, EvaluationRecord>>,
    root: Option<PathBuf>,
}

impl EvaluationCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(root: impl Into<PathBuf>) -> std::io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self {
            memory: RwLock::default(),
            root: Some(root),
        })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn get(&self, key: &CacheKey) -> std::io::Result<Option<EvaluationRecord>> {
        if let Some(hit) = self.memory.read().expect("cache lock").get(key) {
            return Ok(Some(hit.clone()));
        }
        let Some(root) = &self.root else {
            return Ok(None);
        };
        let path = root.join(key.relative_path());
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e),
        };
        let record: EvaluationRecord = serde_json::from_slice(&bytes).map_err(|e| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("corrupt cache entry {}: {e}", path.display()),
            )
        })?;
        self.memory
            .write()
            .expect("cache lock")
            .insert(key.clone(), record.clone());
        Ok(Some(record))
    }

    pub fn contains(&self, key: &CacheKey) -> std::io::Result<bool> {
        Ok(self.get(key)?.is_some())
    }

    /// Stores `record`; concurrent writers of one key hold identical content,
    /// so the last rename wins harmlessly.
    pub fn put(&self, key: &CacheKey, record: &EvaluationRecord) -> std::io::Result<()> {
        if let Some(root) = &self.root {
            let path = root.join(key.relative_path());
            let dir = path.parent().expect("fan-out dir");
            fs::create_dir_all(dir)?;
            let mut tmp = tempfile_in(dir, key)?;
            let bytes = serde_json::to_vec(record).expect("record serializes");
            tmp.1.write_all(&bytes)?;
            tmp.1.sync_all()?;
            drop(tmp.1);
            fs::rename(&tmp.0, &path)?;
        }
        self.memory
            .write()
            .expect("cache lock")
            .insert(key.clone(), record.clone());
        Ok(())
    }

    /// Seeds the memory layer, e.g. from a checkpoint's evaluation store.
    pub fn prime(&self, key: CacheKey, record: EvaluationRecord) {
        self.memory.write().expect("cache lock").entry(key).or_insert(record);
    }

    pub fn len_in_memory(&self) -> usize {
        self.memory.read().expect("cache lock").len()
    }
}

fn tempfile_in(dir: &Path, key: &CacheKey) -> std::io::Result<(PathBuf, fs::File)> {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    let path = dir.join(format!(".{}.{}.{n}.tmp", key.digest(), std::process::id()));
    let file = fs::File::create(&path)?;
    Ok((path, file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CandidateId, ObjectiveId, Score, SideInfo};

    fn ident() -> EvaluatorIdentity {
        EvaluatorIdentity::new("toy", "1")
    }

    fn record(score: f64) -> EvaluationRecord {
        EvaluationRecord {
            candidate_id: CandidateId(0),
            objective_id: ObjectiveId::Scalar,
            score: Score::new(score).unwrap(),
            side_info: SideInfo::new().with_text("note", "x"),
            evaluator_calls: 1,
            wall_time_ms: 3,
            from_cache: false,
        }
    }

    #[test]
    fn key_is_byte_sensitive() {
        let a = CacheKey::new("abc", None, &ident());
        let b = CacheKey::new("abc ", None, &ident());
        assert_ne!(a, b);
        assert_eq!(a, CacheKey::new("abc", None, &ident()));
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn key_covers_example_and_evaluator_version() {
        let e1 = Example::train("e1", serde_json::json!({"t": 1}));
        let e2 = Example::train("e1", serde_json::json!({"t": 2}));
        let base = CacheKey::new("x", Some(&e1), &ident());
        assert_ne!(base, CacheKey::new("x", Some(&e2), &ident()));
        assert_ne!(base, CacheKey::new("x", None, &ident()));
        assert_ne!(base, CacheKey::new("x", Some(&e1), &EvaluatorIdentity::new("toy", "2")));
    }

    #[test]
    fn disk_layout_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let key = CacheKey::new("abc", None, &ident());
        {
            let cache = EvaluationCache::on_disk(dir.path()).unwrap();
            cache.put(&key, &record(0.25)).unwrap();
        }
        let d = key.digest();
        let expected = dir.path().join(&d[0..2]).join(&d[2..4]).join(format!("{d}.json"));
        assert!(expected.is_file());
        let fresh = EvaluationCache::on_disk(dir.path()).unwrap();
        assert_eq!(fresh.len_in_memory(), 0);
        assert_eq!(fresh.get(&key).unwrap(), Some(record(0.25)));
        assert_eq!(fresh.len_in_memory(), 1);
    }

    #[test]
    fn corrupt_entry_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let key = CacheKey::new("abc", None, &ident());
        let cache = EvaluationCache::on_disk(dir.path()).unwrap();
        cache.put(&key, &record(0.25)).unwrap();
        let d = key.digest();
        let path = dir.path().join(&d[0..2]).join(&d[2..4]).join(format!("{d}.json"));
        fs::write(&path, b"{not json").unwrap();
        let fresh = EvaluationCache::on_disk(dir.path()).unwrap();
        assert!(fresh.get(&key).is_err());
    }
}
