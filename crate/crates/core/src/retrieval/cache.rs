use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::index::{hex, InvertedIndex};
use super::search::{search_topk, EvidenceSet};
use crate::error::{Error, Result};

pub const CACHE_DIR_ENV: &str = "EVIQ_CACHE_DIR";

#[derive(Serialize, Deserialize)]
struct Entry {
    event: String,
    k: usize,
    /// (doc id, score bits); bits keep scores exact across the round trip.
    hits: Vec<(usize, u64)>,
}

/// Search front-end that memoizes results in memory and, when a directory is
/// configured, on disk keyed by (index hash, event, K).
pub struct Retriever {
    index: InvertedIndex,
    index_hash: String,
    dir: Option<PathBuf>,
    memo: HashMap<(String, usize), EvidenceSet>,
}

impl Retriever {
    pub fn new(index: InvertedIndex, dir: Option<PathBuf>) -> Self {
        let index_hash = index.content_hash();
        Self { index, index_hash, dir, memo: HashMap::new() }
    }

    /// Uses `EVIQ_CACHE_DIR` when set.
    pub fn from_env(index: InvertedIndex) -> Self {
        let dir = std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from);
        Self::new(index, dir)
    }

    pub fn index(&self) -> &InvertedIndex {
        &self.index
    }

    pub fn index_hash(&self) -> &str {
        &self.index_hash
    }

    fn cache_path(&self, dir: &Path, event: &str, k: usize) -> PathBuf {
        let mut h = Sha256::new();
        h.update(self.index_hash.as_bytes());
        h.update([0]);
        h.update(event.as_bytes());
        h.update([0]);
        h.update((k as u64).to_le_bytes());
        dir.join(format!("{}.json", hex(&h.finalize())))
    }

    fn read_disk(&self, path: &Path, event: &str, k: usize) -> Option<EvidenceSet> {
        let text = fs::read_to_string(path).ok()?;
        let entry: Entry = serde_json::from_str(&text).ok()?;
        if entry.event != event || entry.k != k || entry.hits.iter().any(|h| h.0 >= self.index.num_docs()) {
            log::warn!("event=cache_mismatch path={}", path.display());
            return None;
        }
        let ranked: Vec<(usize, f64)> = entry.hits.iter().map(|&(d, b)| (d, f64::from_bits(b))).collect();
        Some(EvidenceSet::from_ranked(&self.index, &ranked))
    }

    fn write_disk(&self, dir: &Path, path: &Path, event: &str, k: usize, set: &EvidenceSet) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating cache dir {}", dir.display()), e))?;
        let entry = Entry {
            event: event.to_string(),
            k,
            hits: set.ranked().into_iter().map(|(d, s)| (d, s.to_bits())).collect(),
        };
        let body = serde_json::to_string(&entry).expect("cache entry serializes");
        // Write then rename so concurrent readers never see a partial file.
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        fs::write(&tmp, body).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming {}", tmp.display()), e))
    }

    pub fn search(&mut self, event: &str, k: usize) -> Result<EvidenceSet> {
        let key = (event.to_string(), k);
        if let Some(s) = self.memo.get(&key) {
            return Ok(s.clone());
        }
        let set = match self.dir.clone() {
            Some(dir) => {
                let path = self.cache_path(&dir, event, k);
                match self.read_disk(&path, event, k) {
                    Some(s) => s,
                    None => {
                        let s = search_topk(&self.index, event, k);
                        self.write_disk(&dir, &path, event, k, &s)?;
                        s
                    }
                }
            }
            None => search_topk(&self.index, event, k),
        };
        self.memo.insert(key, set.clone());
        Ok(set)
    }
}
