//! Local copies of immutable payload and parameters documents, one file per
//! document under `<data_dir>/docs`, least recently used evicted first.

use crate::model::{DocumentId, ParametersDoc, PayloadDoc};
use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

pub const DEFAULT_DOC_CACHE_ENTRIES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Kind {
    Payload,
    Parameters,
}

impl Kind {
    fn suffix(self) -> &'static str {
        match self {
            Kind::Payload => "payload.json",
            Kind::Parameters => "params.json",
        }
    }
}

type Key = (Kind, DocumentId);

#[derive(Default)]
struct Lru {
    tick: u64,
    by_key: HashMap<Key, u64>,
    by_tick: BTreeMap<u64, Key>,
}

impl Lru {
    fn touch(&mut self, key: Key) {
        if let Some(old) = self.by_key.remove(&key) {
            self.by_tick.remove(&old);
        }
        self.tick += 1;
        self.by_key.insert(key, self.tick);
        self.by_tick.insert(self.tick, key);
    }

    fn remove(&mut self, key: &Key) {
        if let Some(t) = self.by_key.remove(key) {
            self.by_tick.remove(&t);
        }
    }

    fn oldest(&self) -> Option<Key> {
        self.by_tick.values().next().copied()
    }
}

pub struct DocCache {
    dir: PathBuf,
    capacity: usize,
    lru: Mutex<Lru>,
}

impl DocCache {
    /// Indexes whatever a previous run left in `dir`, oldest file first.
    pub fn open(dir: &Path, capacity: usize) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut found = Vec::new();
        for entry in std::fs::read_dir(dir)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let Some((id, suffix)) = name.split_once('.') else { continue };
            let kind = match suffix {
                "payload.json" => Kind::Payload,
                "params.json" => Kind::Parameters,
                _ => continue,
            };
            let Ok(id) = id.parse::<DocumentId>() else { continue };
            let mtime = entry.metadata().and_then(|m| m.modified()).ok();
            found.push((mtime, (kind, id)));
        }
        found.sort();
        let cache = Self { dir: dir.to_owned(), capacity: capacity.max(1), lru: Mutex::new(Lru::default()) };
        {
            let mut lru = cache.lru.lock();
            for (_, key) in found {
                lru.touch(key);
            }
        }
        cache.evict();
        Ok(cache)
    }

    fn path(&self, key: &Key) -> PathBuf {
        self.dir.join(format!("{}.{}", key.1, key.0.suffix()))
    }

    fn get<T: DeserializeOwned>(&self, key: Key) -> Option<T> {
        let mut lru = self.lru.lock();
        if !lru.by_key.contains_key(&key) {
            return None;
        }
        match std::fs::read(self.path(&key)).ok().and_then(|b| serde_json::from_slice(&b).ok()) {
            Some(doc) => {
                lru.touch(key);
                Some(doc)
            }
            None => {
                lru.remove(&key);
                None
            }
        }
    }

    fn put<T: Serialize>(&self, key: Key, doc: &T) {
        let path = self.path(&key);
        let tmp = path.with_extension("tmp");
        let body = serde_json::to_vec(doc).expect("documents serialize");
        if let Err(e) = std::fs::write(&tmp, body).and_then(|_| std::fs::rename(&tmp, &path)) {
            tracing::warn!(error = %e, "could not cache document");
            return;
        }
        self.lru.lock().touch(key);
        self.evict();
    }

    fn evict(&self) {
        let mut lru = self.lru.lock();
        while lru.by_key.len() > self.capacity {
            let Some(key) = lru.oldest() else { break };
            lru.remove(&key);
            let _ = std::fs::remove_file(self.path(&key));
        }
    }

    pub fn payload(&self, id: DocumentId) -> Option<PayloadDoc> {
        self.get((Kind::Payload, id))
    }

    pub fn put_payload(&self, doc: &PayloadDoc) {
        self.put((Kind::Payload, doc.id), doc);
    }

    pub fn parameters(&self, id: DocumentId) -> Option<ParametersDoc> {
        self.get((Kind::Parameters, id))
    }

    pub fn put_parameters(&self, doc: &ParametersDoc) {
        self.put((Kind::Parameters, doc.id), doc);
    }

    pub fn len(&self) -> usize {
        self.lru.lock().by_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
