//! Centralized application state: documents, results and the per-client
//! logical clocks.
//!
//! [`Store`] owns a [`StoreState`] behind a single lock and writes every
//! mutation to a [`Journal`] before applying it. The in-memory store uses a
//! journal that discards entries; [`FileStore`] appends length-prefixed,
//! CRC-checked records to a log and can fold them into a snapshot. Another
//! backend (a document database, say) plugs in by implementing
//! [`StateStore`].

mod file;
mod state;

pub use file::{FileJournal, FileStoreOptions};
pub use state::{ClientRecord, Mutation, StoreState};

use crate::clock::Clock;
use crate::error::ApiError;
use crate::model::{
    AssignmentDoc, ClientDescriptor, ClientId, ClientStateSnapshot, CommitBatch, DocumentId,
    Millis, ParametersDoc, PayloadDoc, ResultRecord, TaskDoc, TaskStatus, TreeValue,
};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use std::io;
use std::path::Path;
use std::sync::Arc;

pub const DEFAULT_ONLINE_WINDOW_MS: u64 = 30_000;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("duplicate document id {0}")]
    DuplicateId(DocumentId),
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("journal write failed: {0}")]
    Journal(#[from] io::Error),
    #[error("corrupt store data: {0}")]
    Corrupt(String),
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(m) => ApiError::not_found(m),
            StoreError::InvalidArgument(_)
            | StoreError::DuplicateId(_)
            | StoreError::DanglingReference(_) => ApiError::invalid_argument(e.to_string()),
            StoreError::Journal(_) | StoreError::Corrupt(_) => ApiError::unavailable(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitOutcome {
    pub ids: Vec<DocumentId>,
    /// New clock value for every client that received tasks, in client order.
    pub clocks: Vec<(ClientId, u64)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AppendOutcome {
    Appended {
        client_id: ClientId,
        assignment_id: DocumentId,
        ts: u64,
    },
    Duplicate,
    Rejected(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StatusOutcome {
    Applied {
        client_id: ClientId,
        assignment_id: DocumentId,
        ts: u64,
    },
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    #[default]
    Tasks,
    Results,
    Clients,
    Assignments,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QueryFilter {
    pub kind: QueryKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assignment: Option<DocumentId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<DocumentId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client: Option<ClientId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<TaskStatus>,
    /// Inclusive lower bound on created_at (recorded_at for results).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub since: Option<Millis>,
    /// Exclusive upper bound.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub until: Option<Millis>,
    #[serde(default)]
    pub online_only: bool,
}

impl QueryFilter {
    pub fn tasks_of(assignment: DocumentId) -> Self {
        Self { kind: QueryKind::Tasks, assignment: Some(assignment), ..Default::default() }
    }

    pub fn results_of_task(task: DocumentId) -> Self {
        Self { kind: QueryKind::Results, task: Some(task), ..Default::default() }
    }

    pub fn results_of_assignment(assignment: DocumentId) -> Self {
        Self { kind: QueryKind::Results, assignment: Some(assignment), ..Default::default() }
    }

    pub fn clients(online_only: bool) -> Self {
        Self { kind: QueryKind::Clients, online_only, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if let (Some(a), Some(b)) = (self.since, self.until) {
            if a > b {
                return Err(StoreError::InvalidArgument(format!("empty time range [{a}, {b})")));
            }
        }
        match self.kind {
            QueryKind::Results if self.task.is_none() && self.assignment.is_none() => Err(
                StoreError::InvalidArgument("result queries need a task or assignment".into()),
            ),
            QueryKind::Clients
                if self.task.is_some() || self.assignment.is_some() || self.status.is_some() =>
            {
                Err(StoreError::InvalidArgument(
                    "client queries accept only client and online_only".into(),
                ))
            }
            QueryKind::Results | QueryKind::Assignments if self.status.is_some() => Err(
                StoreError::InvalidArgument("status filter applies to task queries only".into()),
            ),
            _ if self.online_only && self.kind != QueryKind::Clients => Err(
                StoreError::InvalidArgument("online_only applies to client queries only".into()),
            ),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "items", rename_all = "snake_case")]
pub enum QueryResult {
    Tasks(Vec<TaskDoc>),
    Results(Vec<ResultRecord>),
    Clients(Vec<ClientDescriptor>),
    Assignments(Vec<AssignmentDoc>),
}

pub trait StateStore: Send + Sync {
    /// Idempotently adds a client with clock 0.
    fn register_client(&self, client: &ClientId) -> Result<(), StoreError>;

    fn commit_documents(&self, batch: CommitBatch) -> Result<CommitOutcome, StoreError>;

    fn fetch_client_state(&self, client: &ClientId) -> Result<ClientStateSnapshot, StoreError>;

    fn append_result(
        &self,
        task: DocumentId,
        seq: u64,
        value: TreeValue,
        produced_at: Millis,
    ) -> Result<AppendOutcome, StoreError>;

    fn set_status(
        &self,
        task: DocumentId,
        to: TaskStatus,
        error_log: Option<String>,
    ) -> Result<StatusOutcome, StoreError>;

    fn query(&self, filter: &QueryFilter) -> Result<QueryResult, StoreError>;

    fn get_payload(&self, id: DocumentId) -> Result<PayloadDoc, StoreError>;

    fn get_parameters(&self, id: DocumentId) -> Result<ParametersDoc, StoreError>;

    fn get_task(&self, id: DocumentId) -> Result<TaskDoc, StoreError>;

    /// A consistent copy of everything, for equivalence checks.
    fn dump(&self) -> StoreState;
}

/// Receives every mutation before it is applied.
pub trait Journal: Send {
    fn record(&mut self, entry: &Mutation) -> io::Result<()>;

    /// Called with the post-mutation state; a chance to compact.
    fn after_apply(&mut self, _state: &StoreState) -> io::Result<()> {
        Ok(())
    }
}

/// Journal for the in-memory store.
#[derive(Debug, Default)]
pub struct NullJournal;

impl Journal for NullJournal {
    fn record(&mut self, _: &Mutation) -> io::Result<()> {
        Ok(())
    }
}

pub type MemoryStore = Store<NullJournal>;
pub type FileStore = Store<FileJournal>;

pub struct Store<J: Journal> {
    inner: Mutex<Inner<J>>,
    clock: Arc<dyn Clock>,
    online_window_ms: u64,
}

struct Inner<J> {
    state: StoreState,
    journal: J,
}

impl MemoryStore {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Store::with_journal(StoreState::default(), NullJournal, clock)
    }
}

impl FileStore {
    /// Opens (or creates) a store directory, replaying snapshot and log.
    pub fn open(
        dir: impl AsRef<Path>,
        clock: Arc<dyn Clock>,
        options: FileStoreOptions,
    ) -> Result<Self, StoreError> {
        let (state, journal) = FileJournal::open(dir.as_ref(), options)?;
        Ok(Store::with_journal(state, journal, clock))
    }

    /// Folds the log into a snapshot file and truncates the log.
    pub fn snapshot(&self) -> Result<(), StoreError> {
        let mut inner = self.inner.lock();
        let Inner { state, journal } = &mut *inner;
        journal.write_snapshot(state)?;
        Ok(())
    }
}

impl<J: Journal> Store<J> {
    pub fn with_journal(state: StoreState, journal: J, clock: Arc<dyn Clock>) -> Self {
        Self {
            inner: Mutex::new(Inner { state, journal }),
            clock,
            online_window_ms: DEFAULT_ONLINE_WINDOW_MS,
        }
    }

    pub fn with_online_window_ms(mut self, window: u64) -> Self {
        self.online_window_ms = window;
        self
    }

    pub fn online_window_ms(&self) -> u64 {
        self.online_window_ms
    }

    fn mutate(inner: &mut Inner<J>, entry: Mutation) -> Result<(), StoreError> {
        inner.journal.record(&entry)?;
        inner.state.apply(&entry);
        if let Err(e) = inner.journal.after_apply(&inner.state) {
            // The mutation itself is durable in the log already.
            tracing::warn!(error = %e, "store compaction failed");
        }
        Ok(())
    }
}

impl<J: Journal> StateStore for Store<J> {
    fn register_client(&self, client: &ClientId) -> Result<(), StoreError> {
        let mut inner = self.inner.lock();
        if inner.state.clients.contains_key(client) {
            return Ok(());
        }
        Self::mutate(&mut inner, Mutation::RegisterClient { client_id: client.clone() })
    }

    fn commit_documents(&self, batch: CommitBatch) -> Result<CommitOutcome, StoreError> {
        let mut inner = self.inner.lock();
        inner.state.check_commit(&batch)?;
        let ids = batch.ids();
        if batch.is_empty() {
            return Ok(CommitOutcome { ids, clocks: Vec::new() });
        }
        let mut clients: Vec<ClientId> = batch.tasks.iter().map(|t| t.client_id.clone()).collect();
        clients.sort();
        clients.dedup();
        let at = self.clock.now_ms();
        Self::mutate(&mut inner, Mutation::Commit { batch, at })?;
        let clocks = clients
            .into_iter()
            .map(|c| {
                let ts = inner.state.clients[&c].ts;
                (c, ts)
            })
            .collect();
        Ok(CommitOutcome { ids, clocks })
    }

    fn fetch_client_state(&self, client: &ClientId) -> Result<ClientStateSnapshot, StoreError> {
        let now = self.clock.now_ms();
        let mut inner = self.inner.lock();
        let record = inner
            .state
            .clients
            .get_mut(client)
            .ok_or_else(|| StoreError::NotFound(format!("client {client}")))?;
        record.last_seen = Some(now);
        Ok(inner.state.snapshot_of(client))
    }

    fn append_result(
        &self,
        task: DocumentId,
        seq: u64,
        value: TreeValue,
        produced_at: Millis,
    ) -> Result<AppendOutcome, StoreError> {
        let mut inner = self.inner.lock();
        let Some(doc) = inner.state.tasks.get(&task) else {
            return Ok(AppendOutcome::Rejected(format!("unknown task {task}")));
        };
        if seq < doc.result_count {
            return Ok(AppendOutcome::Duplicate);
        }
        if doc.status != TaskStatus::Active {
            return Ok(AppendOutcome::Rejected(format!("task {task} is {}", doc.status)));
        }
        if seq > doc.result_count {
            return Ok(AppendOutcome::Rejected(format!(
                "seq {seq} leaves a gap after {}",
                doc.result_count
            )));
        }
        let (client_id, assignment_id) = (doc.client_id.clone(), doc.assignment_id);
        let recorded_at = self.clock.now_ms();
        Self::mutate(
            &mut inner,
            Mutation::AppendResult { task_id: task, seq, value, produced_at, recorded_at },
        )?;
        let ts = inner.state.clients[&client_id].ts;
        Ok(AppendOutcome::Appended { client_id, assignment_id, ts })
    }

    fn set_status(
        &self,
        task: DocumentId,
        to: TaskStatus,
        error_log: Option<String>,
    ) -> Result<StatusOutcome, StoreError> {
        if !to.is_terminal() {
            return Err(StoreError::InvalidArgument(format!("cannot set status to {to}")));
        }
        let mut inner = self.inner.lock();
        let Some(doc) = inner.state.tasks.get(&task) else {
            tracing::warn!(%task, "status change for unknown task ignored");
            return Ok(StatusOutcome::Ignored);
        };
        if !crate::model::validate_transition(doc.status, to) {
            return Ok(StatusOutcome::Ignored);
        }
        let (client_id, assignment_id) = (doc.client_id.clone(), doc.assignment_id);
        let at = self.clock.now_ms();
        Self::mutate(&mut inner, Mutation::SetStatus { task_id: task, status: to, error_log, at })?;
        let ts = inner.state.clients[&client_id].ts;
        Ok(StatusOutcome::Applied { client_id, assignment_id, ts })
    }

    fn query(&self, filter: &QueryFilter) -> Result<QueryResult, StoreError> {
        filter.validate()?;
        let now = self.clock.now_ms();
        let inner = self.inner.lock();
        Ok(inner.state.query(filter, now, self.online_window_ms))
    }

    fn get_payload(&self, id: DocumentId) -> Result<PayloadDoc, StoreError> {
        self.inner
            .lock()
            .state
            .payloads
            .get(&id)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(format!("payload {id}")))
    }

    fn get_parameters(&self, id: DocumentId) -> Result<ParametersDoc, StoreError> {
        self.inner
            .lock()
            .state
            .parameters
            .get(&id)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(format!("parameters {id}")))
    }

    fn get_task(&self, id: DocumentId) -> Result<TaskDoc, StoreError> {
        self.inner
            .lock()
            .state
            .tasks
            .get(&id)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(format!("task {id}")))
    }

    fn dump(&self) -> StoreState {
        self.inner.lock().state.clone()
    }
}
