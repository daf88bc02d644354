use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};

use thiserror::Error;

use super::{CacheKey, ChatExchange};

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache io at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt cache record {location}: {message}")]
    Corrupt { location: String, message: String },
    #[error("digest mismatch in {location}: stored key {stored}, recomputed {computed}")]
    DigestMismatch {
        location: String,
        stored: String,
        computed: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CacheError + '_ {
    move |source| CacheError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExportSelection {
    All,
    Keys(Vec<String>),
    Model(String),
}

impl ExportSelection {
    fn admits(&self, exchange: &ChatExchange) -> bool {
        match self {
            ExportSelection::All => true,
            ExportSelection::Keys(keys) => keys.contains(&exchange.cache_key),
            ExportSelection::Model(m) => exchange.request.model == *m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ImportSummary {
    pub added: usize,
    pub already_present: usize,
}

enum Storage {
    Memory(RwLock<BTreeMap<String, ChatExchange>>),
    Dir { root: PathBuf, index_lock: Mutex<()> },
}

/// Write-once store of [`ChatExchange`]s keyed by request digest.
///
/// On disk: `objects/<key>.json` per exchange plus an append-only
/// `index.tsv` of `key<TAB>model`. Writes go to a temp file and are
/// hard-linked into place, so a key is written at most once and concurrent
/// writers of the same key all read back the first winner.
pub struct ResponseCache {
    storage: Storage,
    tmp_counter: AtomicU64,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self {
            storage: Storage::Memory(RwLock::new(BTreeMap::new())),
            tmp_counter: AtomicU64::new(0),
        }
    }

    pub fn open(root: &Path) -> Result<Self, CacheError> {
        fs::create_dir_all(root.join("objects")).map_err(io_err(root))?;
        fs::create_dir_all(root.join("tmp")).map_err(io_err(root))?;
        Ok(Self {
            storage: Storage::Dir {
                root: root.to_path_buf(),
                index_lock: Mutex::new(()),
            },
            tmp_counter: AtomicU64::new(0),
        })
    }

    fn object_path(root: &Path, key: &str) -> PathBuf {
        root.join("objects").join(format!("{key}.json"))
    }

    /// Looks up `key`, verifying the stored record's digest on every read.
    pub fn get(&self, key: &CacheKey) -> Result<Option<ChatExchange>, CacheError> {
        let hex = key.to_hex();
        match &self.storage {
            Storage::Memory(map) => Ok(map.read().expect("cache lock").get(&hex).cloned()),
            Storage::Dir { root, .. } => {
                let path = Self::object_path(root, &hex);
                let bytes = match fs::read(&path) {
                    Ok(b) => b,
                    Err(e) if e.kind() == ErrorKind::NotFound => return Ok(None),
                    Err(e) => return Err(io_err(&path)(e)),
                };
                let exchange = decode(&bytes, &path.display().to_string())?;
                if exchange.cache_key != hex {
                    return Err(CacheError::DigestMismatch {
                        location: path.display().to_string(),
                        stored: exchange.cache_key,
                        computed: hex,
                    });
                }
                Ok(Some(exchange))
            }
        }
    }

    /// Stores `exchange` unless its key is already present, and returns
    /// whichever record ends up under the key.
    pub fn put(&self, exchange: ChatExchange) -> Result<ChatExchange, CacheError> {
        verify(&exchange, "put")?;
        match &self.storage {
            Storage::Memory(map) => {
                let mut map = map.write().expect("cache lock");
                Ok(map
                    .entry(exchange.cache_key.clone())
                    .or_insert(exchange)
                    .clone())
            }
            Storage::Dir { root, index_lock } => {
                let final_path = Self::object_path(root, &exchange.cache_key);
                let tmp = root.join("tmp").join(format!(
                    "{}-{}-{}",
                    exchange.cache_key,
                    std::process::id(),
                    self.tmp_counter.fetch_add(1, Ordering::Relaxed)
                ));
                let body = serde_json::to_vec_pretty(&exchange).expect("exchange serializes");
                fs::write(&tmp, &body).map_err(io_err(&tmp))?;
                let linked = fs::hard_link(&tmp, &final_path);
                let _ = fs::remove_file(&tmp);
                match linked {
                    Ok(()) => {
                        let _guard = index_lock.lock().expect("index lock");
                        let index = root.join("index.tsv");
                        let mut f = OpenOptions::new()
                            .create(true)
                            .append(true)
                            .open(&index)
                            .map_err(io_err(&index))?;
                        writeln!(f, "{}\t{}", exchange.cache_key, exchange.request.model)
                            .map_err(io_err(&index))?;
                        Ok(exchange)
                    }
                    Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                        let key = CacheKey::from_hex(&exchange.cache_key).expect("valid hex key");
                        Ok(self.get(&key)?.expect("existing record"))
                    }
                    Err(e) => Err(io_err(&final_path)(e)),
                }
            }
        }
    }

    /// All stored keys, sorted.
    pub fn keys(&self) -> Result<Vec<String>, CacheError> {
        match &self.storage {
            Storage::Memory(map) => Ok(map.read().expect("cache lock").keys().cloned().collect()),
            Storage::Dir { root, .. } => {
                let dir = root.join("objects");
                let mut keys = Vec::new();
                for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
                    let entry = entry.map_err(io_err(&dir))?;
                    let name = entry.file_name();
                    if let Some(key) = name.to_str().and_then(|n| n.strip_suffix(".json")) {
                        keys.push(key.to_string());
                    }
                }
                keys.sort();
                Ok(keys)
            }
        }
    }

    /// Selected exchanges as line-delimited JSON sorted by key.
    pub fn export(&self, selection: &ExportSelection) -> Result<String, CacheError> {
        let mut out = String::new();
        for key in self.keys()? {
            let parsed = CacheKey::from_hex(&key).ok_or_else(|| CacheError::Corrupt {
                location: key.clone(),
                message: "file name is not a cache key".into(),
            })?;
            if let Some(exchange) = self.get(&parsed)? {
                if selection.admits(&exchange) {
                    out.push_str(&serde_json::to_string(&exchange).expect("exchange serializes"));
                    out.push('\n');
                }
            }
        }
        Ok(out)
    }

    /// Loads a fixture produced by [`export`](Self::export). Every record's
    /// digest is checked before anything is written.
    pub fn import(&self, fixture: &str) -> Result<ImportSummary, CacheError> {
        let mut records = Vec::new();
        for (i, line) in fixture.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let location = format!("fixture line {}", i + 1);
            let exchange = decode(line.as_bytes(), &location)?;
            verify(&exchange, &location)?;
            records.push(exchange);
        }
        let mut summary = ImportSummary::default();
        for exchange in records {
            let key = CacheKey::from_hex(&exchange.cache_key).expect("verified key");
            if self.get(&key)?.is_some() {
                summary.already_present += 1;
            } else {
                self.put(exchange)?;
                summary.added += 1;
            }
        }
        Ok(summary)
    }
}

fn decode(bytes: &[u8], location: &str) -> Result<ChatExchange, CacheError> {
    let exchange: ChatExchange = serde_json::from_slice(bytes).map_err(|e| CacheError::Corrupt {
        location: location.to_string(),
        message: e.to_string(),
    })?;
    verify(&exchange, location)?;
    Ok(exchange)
}

fn verify(exchange: &ChatExchange, location: &str) -> Result<(), CacheError> {
    if !exchange.digest_ok() {
        return Err(CacheError::DigestMismatch {
            location: location.to_string(),
            stored: exchange.cache_key.clone(),
            computed: exchange.request.cache_key().to_hex(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llmclient::{ChatMessage, ChatRequest, DecodingConfig};

    fn exchange(text: &str, model: &str) -> ChatExchange {
        ChatExchange::new(
            ChatRequest::new(model, vec![ChatMessage::user(text)], DecodingConfig::greedy()),
            vec![format!("reply to {text}")],
            None,
        )
    }

    #[test]
    fn export_import_export_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = ResponseCache::open(&dir.path().join("a")).unwrap();
        for i in 0..5 {
            a.put(exchange(&format!("q{i}"), if i % 2 == 0 { "m1" } else { "m2" })).unwrap();
        }
        let first = a.export(&ExportSelection::All).unwrap();
        let b = ResponseCache::open(&dir.path().join("b")).unwrap();
        assert_eq!(b.import(&first).unwrap().added, 5);
        assert_eq!(b.export(&ExportSelection::All).unwrap(), first);
        let again = b.import(&first).unwrap();
        assert_eq!(again, ImportSummary { added: 0, already_present: 5 });
        assert_eq!(b.export(&ExportSelection::All).unwrap(), first);
    }

    #[test]
    fn selection_filters() {
        let c = ResponseCache::in_memory();
        let e1 = c.put(exchange("q1", "m1")).unwrap();
        c.put(exchange("q2", "m2")).unwrap();
        let by_model = c.export(&ExportSelection::Model("m2".into())).unwrap();
        assert_eq!(by_model.lines().count(), 1);
        assert!(by_model.contains("q2"));
        let by_key = c.export(&ExportSelection::Keys(vec![e1.cache_key.clone()])).unwrap();
        assert!(by_key.contains("q1") && !by_key.contains("q2"));
    }

    #[test]
    fn tampered_fixture_rejected() {
        let c = ResponseCache::in_memory();
        c.put(exchange("q1", "m1")).unwrap();
        let fixture = c.export(&ExportSelection::All).unwrap().replace("\"q1\"", "\"q9\"");
        let fresh = ResponseCache::in_memory();
        assert!(matches!(
            fresh.import(&fixture),
            Err(CacheError::DigestMismatch { .. })
        ));
        assert!(fresh.keys().unwrap().is_empty());
    }

    #[test]
    fn tampered_object_detected_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let c = ResponseCache::open(dir.path()).unwrap();
        let e = c.put(exchange("q1", "m1")).unwrap();
        let path = dir.path().join("objects").join(format!("{}.json", e.cache_key));
        let body = fs::read_to_string(&path).unwrap().replace("\"q1\"", "\"q2\"");
        fs::write(&path, body).unwrap();
        let key = CacheKey::from_hex(&e.cache_key).unwrap();
        assert!(matches!(c.get(&key), Err(CacheError::DigestMismatch { .. })));
    }

    #[test]
    fn first_writer_wins() {
        let dir = tempfile::tempdir().unwrap();
        let c = ResponseCache::open(dir.path()).unwrap();
        let first = c.put(exchange("q", "m")).unwrap();
        let mut second = exchange("q", "m");
        second.response_texts = vec!["different".into()];
        assert_eq!(c.put(second).unwrap(), first);
        let index = fs::read_to_string(dir.path().join("index.tsv")).unwrap();
        assert_eq!(index.lines().count(), 1);
    }

    #[test]
    fn concurrent_writers_of_one_key_agree() {
        let dir = tempfile::tempdir().unwrap();
        let c = ResponseCache::open(dir.path()).unwrap();
        let results: Vec<ChatExchange> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..8)
                .map(|i| {
                    let c = &c;
                    s.spawn(move || {
                        let mut e = exchange("same", "m");
                        e.response_texts = vec![format!("writer {i}")];
                        c.put(e).unwrap()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        assert!(results.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(c.keys().unwrap().len(), 1);
    }
}
