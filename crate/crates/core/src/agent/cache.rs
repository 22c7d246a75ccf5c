//! Durable outbox for task outputs.
//!
//! Every result and status a sandbox produces is appended here (and
//! synced) before the sync loop sees it. Server confirmations and forgotten
//! tasks are appended as markers, so replaying the log yields exactly the
//! outputs that still need submitting. The log is an NDJSON file:
//!
//! ```text
//! {"op":"result","produced_at":..,"seq":0,"task":"..","value":..}
//! {"op":"status","error_log":null,"status":"FINISHED","task":".."}
//! {"count":1,"op":"confirmed","task":".."}
//! {"op":"forget","task":".."}
//! ```
//!
//! Lines that do not parse (a torn tail after a crash or a failed write)
//! are skipped on replay.

use super::sync_loop::{LocalTaskEntry, PendingResult};
use crate::model::{canonical_json, DocumentId, Millis, TaskStatus, TreeValue};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

/// Rewrite the log once this many records have accumulated since the last
/// compaction.
const COMPACT_AFTER: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Record {
    Result { task: DocumentId, seq: u64, value: TreeValue, produced_at: Millis },
    Status { task: DocumentId, status: TaskStatus, error_log: Option<String> },
    Confirmed { task: DocumentId, count: u64 },
    Forget { task: DocumentId },
}

/// Where outbox bytes go. Split out so tests can fail writes on demand.
pub trait OutboxWriter: Send {
    /// Appends and syncs.
    fn append(&mut self, bytes: &[u8]) -> io::Result<()>;
    /// Atomically replaces the whole log.
    fn reset(&mut self, contents: &[u8]) -> io::Result<()>;
}

pub struct FileOutbox {
    path: PathBuf,
    file: File,
}

impl FileOutbox {
    pub fn open(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { path: path.to_owned(), file })
    }
}

impl OutboxWriter for FileOutbox {
    fn append(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.file.write_all(bytes)?;
        self.file.sync_data()
    }

    fn reset(&mut self, contents: &[u8]) -> io::Result<()> {
        if contents.is_empty() {
            self.file.set_len(0)?;
            return self.file.sync_all();
        }
        let tmp = self.path.with_extension("tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(contents)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, &self.path)?;
        if let Some(dir) = self.path.parent() {
            File::open(dir)?.sync_all()?;
        }
        self.file = OpenOptions::new().append(true).open(&self.path)?;
        Ok(())
    }
}

struct Inner {
    writer: Box<dyn OutboxWriter>,
    fold: BTreeMap<DocumentId, LocalTaskEntry>,
    since_compaction: usize,
    /// The last write may have left a partial line.
    torn: bool,
    degraded: bool,
    dead: bool,
}

pub struct DurableCache {
    inner: Mutex<Inner>,
}

fn apply(fold: &mut BTreeMap<DocumentId, LocalTaskEntry>, record: Record) {
    match record {
        Record::Result { task, seq, value, produced_at } => {
            let entry = fold.entry(task).or_insert_with(|| LocalTaskEntry::new(task, seq));
            if seq >= entry.next_seq() {
                entry.pending_results.push(PendingResult { seq, value, produced_at });
            }
        }
        Record::Status { task, status, error_log } => {
            let entry = fold.entry(task).or_insert_with(|| LocalTaskEntry::new(task, 0));
            entry.pending_status = Some((status, error_log));
        }
        Record::Confirmed { task, count } => {
            if let Some(entry) = fold.get_mut(&task) {
                if count > entry.submitted_count {
                    entry.submitted_count = count;
                    entry.pending_results.retain(|r| r.seq >= count);
                }
            }
        }
        Record::Forget { task } => {
            fold.remove(&task);
        }
    }
}

/// Folds a log into per-task pending outputs.
pub fn replay(text: &str) -> BTreeMap<DocumentId, LocalTaskEntry> {
    let mut fold = BTreeMap::new();
    for line in text.lines() {
        match serde_json::from_str::<Record>(line) {
            Ok(r) => apply(&mut fold, r),
            Err(_) if line.trim().is_empty() => {}
            Err(e) => tracing::warn!(error = %e, "skipping unreadable outbox line"),
        }
    }
    fold.retain(|_, e| e.has_pending());
    fold
}

fn render(fold: &BTreeMap<DocumentId, LocalTaskEntry>) -> String {
    let mut out = String::new();
    for e in fold.values() {
        let mut push = |r: Record| {
            out.push_str(&canonical_json(&r));
            out.push('\n');
        };
        for r in &e.pending_results {
            push(Record::Result { task: e.task_id, seq: r.seq, value: r.value.clone(), produced_at: r.produced_at });
        }
        if let Some((status, log)) = &e.pending_status {
            push(Record::Status { task: e.task_id, status: *status, error_log: log.clone() });
        }
    }
    out
}

impl DurableCache {
    /// Opens (creating if needed) the log at `path` and returns what is
    /// still pending in it.
    pub fn open(path: &Path) -> io::Result<(Self, BTreeMap<DocumentId, LocalTaskEntry>)> {
        let text = match std::fs::read(path) {
            Ok(b) => String::from_utf8_lossy(&b).into_owned(),
            Err(e) if e.kind() == io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(e),
        };
        let writer = FileOutbox::open(path)?;
        Ok(Self::with_writer(Box::new(writer), &text))
    }

    pub fn with_writer(writer: Box<dyn OutboxWriter>, existing: &str) -> (Self, BTreeMap<DocumentId, LocalTaskEntry>) {
        let fold = replay(existing);
        let torn = !existing.is_empty() && !existing.ends_with('\n');
        let cache = Self {
            inner: Mutex::new(Inner {
                writer,
                fold: fold.clone(),
                since_compaction: existing.lines().count(),
                torn,
                degraded: false,
                dead: false,
            }),
        };
        (cache, fold)
    }

    fn write(&self, record: Record) -> io::Result<()> {
        let mut inner = self.inner.lock();
        if inner.dead {
            return Err(io::Error::new(io::ErrorKind::BrokenPipe, "outbox closed"));
        }
        let mut line = String::new();
        if inner.torn {
            line.push('\n');
        }
        line.push_str(&canonical_json(&record));
        line.push('\n');
        match inner.writer.append(line.as_bytes()) {
            Ok(()) => {
                inner.torn = false;
                if inner.degraded {
                    tracing::info!("outbox writable again");
                }
                inner.degraded = false;
                inner.since_compaction += 1;
                apply(&mut inner.fold, record);
                Ok(())
            }
            Err(e) => {
                inner.torn = true;
                if !inner.degraded {
                    tracing::error!(error = %e, "outbox write failed; pausing task starts");
                }
                inner.degraded = true;
                Err(e)
            }
        }
    }

    pub fn record_result(&self, task: DocumentId, seq: u64, value: TreeValue, produced_at: Millis) -> io::Result<()> {
        self.write(Record::Result { task, seq, value, produced_at })
    }

    pub fn record_status(&self, task: DocumentId, status: TaskStatus, error_log: Option<String>) -> io::Result<()> {
        self.write(Record::Status { task, status, error_log })
    }

    /// The server holds `count` results of `task`.
    pub fn confirm(&self, task: DocumentId, count: u64) {
        let needed = self.inner.lock().fold.get(&task).is_some_and(|e| count > e.submitted_count);
        if needed && self.write(Record::Confirmed { task, count }).is_ok() {
            self.maybe_compact();
        }
    }

    pub fn forget(&self, task: DocumentId) {
        if self.inner.lock().fold.contains_key(&task) && self.write(Record::Forget { task }).is_ok() {
            self.maybe_compact();
        }
    }

    fn maybe_compact(&self) {
        let mut inner = self.inner.lock();
        inner.fold.retain(|_, e| e.has_pending());
        let contents = if inner.fold.is_empty() {
            String::new()
        } else if inner.since_compaction >= COMPACT_AFTER {
            render(&inner.fold)
        } else {
            return;
        };
        match inner.writer.reset(contents.as_bytes()) {
            Ok(()) => {
                inner.since_compaction = contents.lines().count();
                inner.torn = false;
            }
            Err(e) => tracing::warn!(error = %e, "outbox compaction failed"),
        }
    }

    /// True while writes are failing.
    pub fn is_degraded(&self) -> bool {
        self.inner.lock().degraded
    }

    /// Rewrites the current contents; clears degraded mode on success.
    pub fn probe(&self) -> bool {
        let mut inner = self.inner.lock();
        if inner.dead {
            return false;
        }
        let contents = render(&inner.fold);
        match inner.writer.reset(contents.as_bytes()) {
            Ok(()) => {
                inner.since_compaction = contents.lines().count();
                inner.torn = false;
                inner.degraded = false;
                true
            }
            Err(_) => false,
        }
    }

    /// Outputs not yet confirmed.
    pub fn pending(&self) -> BTreeMap<DocumentId, LocalTaskEntry> {
        self.inner.lock().fold.iter().filter(|(_, e)| e.has_pending()).map(|(k, v)| (*k, v.clone())).collect()
    }

    /// Every later write fails, as if the process had died.
    pub fn close(&self) {
        self.inner.lock().dead = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
    use std::sync::Arc;

    fn id(n: u8) -> DocumentId {
        DocumentId::from_bytes([n; 16])
    }

    /// In-memory log that can be told to fail, optionally after writing
    /// part of a record.
    #[derive(Clone, Default)]
    struct Flaky {
        bytes: Arc<parking_lot::Mutex<Vec<u8>>>,
        fail: Arc<AtomicBool>,
        partial: Arc<AtomicUsize>,
    }

    impl OutboxWriter for Flaky {
        fn append(&mut self, bytes: &[u8]) -> io::Result<()> {
            if self.fail.load(Ordering::SeqCst) {
                let n = self.partial.load(Ordering::SeqCst).min(bytes.len());
                self.bytes.lock().extend_from_slice(&bytes[..n]);
                return Err(io::Error::new(io::ErrorKind::Other, "no space left on device"));
            }
            self.bytes.lock().extend_from_slice(bytes);
            Ok(())
        }

        fn reset(&mut self, contents: &[u8]) -> io::Result<()> {
            if self.fail.load(Ordering::SeqCst) {
                return Err(io::Error::new(io::ErrorKind::Other, "no space left on device"));
            }
            *self.bytes.lock() = contents.to_vec();
            Ok(())
        }
    }

    impl Flaky {
        fn text(&self) -> String {
            String::from_utf8(self.bytes.lock().clone()).unwrap()
        }
    }

    #[test]
    fn empty_log_replays_empty() {
        let dir = tempfile::tempdir().unwrap();
        let (_, pending) = DurableCache::open(&dir.path().join("outbox")).unwrap();
        assert!(pending.is_empty());
    }

    #[test]
    fn results_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("outbox");
        {
            let (cache, _) = DurableCache::open(&path).unwrap();
            cache.record_result(id(1), 0, json!(1), 10).unwrap();
            cache.record_result(id(1), 1, json!(2), 11).unwrap();
            cache.record_status(id(1), TaskStatus::Finished, None).unwrap();
        }
        let (_, pending) = DurableCache::open(&path).unwrap();
        let e = &pending[&id(1)];
        assert_eq!(e.pending_results.iter().map(|r| r.seq).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(e.pending_status, Some((TaskStatus::Finished, None)));
        assert!(!e.running);
    }

    #[test]
    fn confirmation_trims_and_full_confirmation_empties_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("outbox");
        let (cache, _) = DurableCache::open(&path).unwrap();
        cache.record_result(id(1), 0, json!("a"), 0).unwrap();
        cache.record_result(id(1), 1, json!("b"), 0).unwrap();
        cache.confirm(id(1), 1);
        let (_, pending) = DurableCache::open(&path).unwrap();
        assert_eq!(pending[&id(1)].pending_results.iter().map(|r| r.seq).collect::<Vec<_>>(), vec![1]);
        cache.confirm(id(1), 2);
        assert_eq!(std::fs::read(&path).unwrap(), b"");
        assert!(cache.pending().is_empty());
    }

    #[test]
    fn forget_drops_everything_for_the_task() {
        let w = Flaky::default();
        let (cache, _) = DurableCache::with_writer(Box::new(w.clone()), "");
        cache.record_result(id(1), 0, json!(0), 0).unwrap();
        cache.record_result(id(2), 0, json!(0), 0).unwrap();
        cache.forget(id(1));
        assert_eq!(replay(&w.text()).keys().copied().collect::<Vec<_>>(), vec![id(2)]);
    }

    #[test]
    fn torn_tail_is_skipped_and_next_record_starts_clean() {
        let w = Flaky::default();
        let (cache, _) = DurableCache::with_writer(Box::new(w.clone()), "");
        cache.record_result(id(1), 0, json!(0), 0).unwrap();
        w.fail.store(true, Ordering::SeqCst);
        w.partial.store(20, Ordering::SeqCst);
        assert!(cache.record_result(id(1), 1, json!(1), 0).is_err());
        assert!(cache.is_degraded());
        w.fail.store(false, Ordering::SeqCst);
        cache.record_result(id(1), 1, json!(1), 0).unwrap();
        assert!(!cache.is_degraded());
        let pending = replay(&w.text());
        assert_eq!(pending[&id(1)].pending_results.iter().map(|r| r.seq).collect::<Vec<_>>(), vec![0, 1]);

        // Reopening a file whose last line is cut off also recovers.
        let torn = format!("{}{{\"op\":\"res", w.text());
        let (cache, pending) = DurableCache::with_writer(Box::new(Flaky::default()), &torn);
        assert_eq!(pending[&id(1)].pending_results.len(), 2);
        assert!(cache.inner.lock().torn);
    }

    #[test]
    fn disk_full_degrades_until_a_write_succeeds() {
        let w = Flaky::default();
        let (cache, _) = DurableCache::with_writer(Box::new(w.clone()), "");
        w.fail.store(true, Ordering::SeqCst);
        assert!(cache.record_status(id(1), TaskStatus::Error, Some("boom".into())).is_err());
        assert!(cache.is_degraded());
        assert!(!cache.probe());
        w.fail.store(false, Ordering::SeqCst);
        assert!(cache.probe());
        assert!(!cache.is_degraded());
        // The failed record was never acknowledged, so it is not pending.
        assert!(cache.pending().is_empty());
    }

    #[test]
    fn closed_cache_refuses_writes() {
        let w = Flaky::default();
        let (cache, _) = DurableCache::with_writer(Box::new(w.clone()), "");
        cache.close();
        assert!(cache.record_result(id(1), 0, json!(0), 0).is_err());
        assert_eq!(w.text(), "");
    }

    #[test]
    fn compaction_keeps_only_pending() {
        let w = Flaky::default();
        let (cache, _) = DurableCache::with_writer(Box::new(w.clone()), "");
        for seq in 0..COMPACT_AFTER as u64 {
            cache.record_result(id(1), seq, json!(seq), 0).unwrap();
        }
        cache.record_result(id(2), 0, json!("x"), 0).unwrap();
        cache.confirm(id(1), COMPACT_AFTER as u64 - 1);
        let text = w.text();
        assert_eq!(text.lines().count(), 2, "{text}");
        let pending = replay(&text);
        assert_eq!(pending[&id(1)].pending_results[0].seq, COMPACT_AFTER as u64 - 1);
        assert_eq!(pending[&id(1)].next_seq(), COMPACT_AFTER as u64);
        assert!(pending.contains_key(&id(2)));
    }

    #[test]
    fn replayed_duplicate_seqs_are_ignored() {
        let line = |seq: u64| canonical_json(&Record::Result { task: id(1), seq, value: json!(seq), produced_at: 0 });
        let text = [line(3), line(4), line(4), line(2)].join("\n");
        let pending = replay(&text);
        assert_eq!(pending[&id(1)].pending_results.iter().map(|r| r.seq).collect::<Vec<_>>(), vec![3, 4]);
        assert_eq!(pending[&id(1)].submitted_count, 3);
    }
}
