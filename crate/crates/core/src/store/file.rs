//! Single-file append log with a snapshot.
//!
//! Log record: `u32` big-endian length of the JSON body, the canonical-JSON
//! [`Mutation`], then a `u32` big-endian CRC32 of the body. A torn or
//! corrupt tail is cut off on open; everything before it is kept.

use super::{Journal, Mutation, StoreError, StoreState};
use crate::model::canonical_json;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

const LOG_FILE: &str = "store.log";
const SNAPSHOT_FILE: &str = "snapshot.json";
const MAX_RECORD_BYTES: u32 = 256 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct FileStoreOptions {
    /// fsync after every record.
    pub sync: bool,
    /// Fold the log into the snapshot after this many records.
    pub snapshot_every: Option<usize>,
}

impl Default for FileStoreOptions {
    fn default() -> Self {
        Self { sync: true, snapshot_every: Some(10_000) }
    }
}

pub struct FileJournal {
    dir: PathBuf,
    log: File,
    options: FileStoreOptions,
    records: usize,
}

pub(crate) fn encode_record(entry: &Mutation) -> Vec<u8> {
    let body = canonical_json(entry).into_bytes();
    let mut out = Vec::with_capacity(body.len() + 8);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc32fast::hash(&body).to_be_bytes());
    out
}

/// Decodes records from the start of `bytes`; returns them with the length
/// of the valid prefix.
pub(crate) fn decode_records(bytes: &[u8]) -> (Vec<Mutation>, usize) {
    let mut entries = Vec::new();
    let mut at = 0usize;
    loop {
        let Some(len_bytes) = bytes.get(at..at + 4) else { break };
        let len = u32::from_be_bytes(len_bytes.try_into().unwrap());
        if len > MAX_RECORD_BYTES {
            break;
        }
        let body_end = at + 4 + len as usize;
        let (Some(body), Some(crc)) = (bytes.get(at + 4..body_end), bytes.get(body_end..body_end + 4))
        else {
            break;
        };
        if crc32fast::hash(body).to_be_bytes() != crc {
            break;
        }
        let Ok(entry) = serde_json::from_slice::<Mutation>(body) else { break };
        entries.push(entry);
        at = body_end + 4;
    }
    (entries, at)
}

impl FileJournal {
    pub(crate) fn open(dir: &Path, options: FileStoreOptions) -> Result<(StoreState, Self), StoreError> {
        fs::create_dir_all(dir)?;
        let snapshot_path = dir.join(SNAPSHOT_FILE);
        let mut state = if snapshot_path.exists() {
            let text = fs::read(&snapshot_path)?;
            serde_json::from_slice(&text)
                .map_err(|e| StoreError::Corrupt(format!("{}: {e}", snapshot_path.display())))?
        } else {
            StoreState::default()
        };

        let log_path = dir.join(LOG_FILE);
        let mut log = OpenOptions::new().read(true).append(true).create(true).open(&log_path)?;
        let mut bytes = Vec::new();
        log.read_to_end(&mut bytes)?;
        let (entries, valid) = decode_records(&bytes);
        if valid < bytes.len() {
            tracing::warn!(
                path = %log_path.display(),
                dropped = bytes.len() - valid,
                "truncating torn tail of store log"
            );
            log.set_len(valid as u64)?;
            log.seek(SeekFrom::End(0))?;
        }
        for entry in &entries {
            state.apply(entry);
        }
        let journal = Self {
            dir: dir.to_owned(),
            log,
            options,
            records: entries.len(),
        };
        Ok((state, journal))
    }

    pub(crate) fn write_snapshot(&mut self, state: &StoreState) -> io::Result<()> {
        let tmp = self.dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        {
            let mut f = File::create(&tmp)?;
            f.write_all(canonical_json(state).as_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, self.dir.join(SNAPSHOT_FILE))?;
        self.log.set_len(0)?;
        self.log.seek(SeekFrom::Start(0))?;
        self.log.sync_all()?;
        self.records = 0;
        Ok(())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl Journal for FileJournal {
    fn record(&mut self, entry: &Mutation) -> io::Result<()> {
        self.log.write_all(&encode_record(entry))?;
        if self.options.sync {
            self.log.sync_data()?;
        }
        self.records += 1;
        Ok(())
    }

    fn after_apply(&mut self, state: &StoreState) -> io::Result<()> {
        if self.options.snapshot_every.is_some_and(|n| self.records >= n) {
            self.write_snapshot(state)?;
        }
        Ok(())
    }
}
