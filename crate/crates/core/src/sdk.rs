//! The user surface: draft documents locally, commit them in one batch,
//! then await or stream what the clients produce.
//!
//! ```no_run
//! # use spada_core::sdk::{UserClient, UserConfig};
//! # use std::time::Duration;
//! let user = UserClient::connect(&UserConfig::load("user.json".as_ref())?);
//! let payload = user.payload(std::fs::read_to_string("mean.py")?, "Average")?;
//! let params = user.parameters(serde_json::json!({"seconds": 5, "signal_name": "speed"}))?;
//! let tasks = user
//!     .list_clients(true)?
//!     .into_iter()
//!     .map(|c| user.task(&c.client_id, payload, Some(params)))
//!     .collect::<Result<Vec<_>, _>>()?;
//! let outcome = user.assignment("Mean speed", &tasks)?.commit()?.await_results(Duration::from_secs(60))?;
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

use crate::agent::config::{load_json, ConfigError};
use crate::bus::{EventFeed, RemoteBus, Subscription, UserEvent};
use crate::error::{ApiError, ErrorCode};
use crate::model::{
    ClientDescriptor, ClientId, CommitBatch, DocumentId, NewAssignment, NewParameters, NewPayload, NewTask,
    ResultRecord, TaskDoc, TaskStatus, TreeValue,
};
use crate::rpc::RpcClient;
use crate::server::{method, CancelParams, CommitReply, ServerNode};
use crate::store::{QueryFilter, QueryResult};
use parking_lot::Mutex;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::mpsc::RecvTimeoutError;
use std::sync::Arc;
use std::time::{Duration, Instant};

/// How often a waiting call re-reads task state in case events were lost.
const POLL_INTERVAL: Duration = Duration::from_secs(1);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserConfig {
    pub server_addr: String,
    pub bus_addr: String,
    pub token: String,
}

impl UserConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        load_json(path)
    }
}

/// What the SDK needs from a deployment.
pub trait UserApi: Send + Sync {
    fn commit(&self, batch: CommitBatch) -> Result<CommitReply, ApiError>;
    fn cancel(&self, task: DocumentId) -> Result<(), ApiError>;
    fn query(&self, filter: &QueryFilter) -> Result<QueryResult, ApiError>;
    fn subscribe(&self, assignment: DocumentId) -> Result<Subscription<UserEvent>, ApiError>;
}

pub struct RemoteApi {
    rpc: RpcClient,
    bus: RemoteBus,
}

impl RemoteApi {
    pub fn new(cfg: &UserConfig) -> Self {
        Self { rpc: RpcClient::new(&cfg.server_addr, &cfg.token), bus: RemoteBus::new(&cfg.bus_addr) }
    }
}

impl UserApi for RemoteApi {
    fn commit(&self, batch: CommitBatch) -> Result<CommitReply, ApiError> {
        self.rpc.call(method::COMMIT, &batch)
    }

    fn cancel(&self, task: DocumentId) -> Result<(), ApiError> {
        self.rpc.call_raw(method::CANCEL, serde_json::to_value(CancelParams { task_id: task }).unwrap()).map(|_| ())
    }

    fn query(&self, filter: &QueryFilter) -> Result<QueryResult, ApiError> {
        self.rpc.call(method::QUERY, filter)
    }

    fn subscribe(&self, assignment: DocumentId) -> Result<Subscription<UserEvent>, ApiError> {
        self.bus.subscribe_events(&assignment).map_err(|e| ApiError::unavailable(e.to_string()))
    }
}

/// Calls a server node in the same process.
pub struct LocalApi {
    pub node: ServerNode,
    pub token: String,
    pub events: Arc<dyn EventFeed>,
}

impl UserApi for LocalApi {
    fn commit(&self, batch: CommitBatch) -> Result<CommitReply, ApiError> {
        self.node.commit(&self.token, batch)
    }

    fn cancel(&self, task: DocumentId) -> Result<(), ApiError> {
        self.node.cancel(&self.token, task)
    }

    fn query(&self, filter: &QueryFilter) -> Result<QueryResult, ApiError> {
        self.node.query(&self.token, filter)
    }

    fn subscribe(&self, assignment: DocumentId) -> Result<Subscription<UserEvent>, ApiError> {
        self.events.subscribe_events(&assignment).map_err(|e| ApiError::unavailable(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DraftContent {
    Payload { name: String, body: String },
    Parameters { value: TreeValue },
    Task { client_id: ClientId, payload_id: DocumentId, parameters_id: Option<DocumentId>, assignment_id: Option<DocumentId> },
    Assignment { name: String, task_ids: Vec<DocumentId> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentDraft {
    pub id: DocumentId,
    pub content: DraftContent,
    pub committed: bool,
}

#[derive(Default)]
struct Drafts {
    order: Vec<DocumentId>,
    docs: BTreeMap<DocumentId, DocumentDraft>,
}

pub struct UserClient {
    api: Arc<dyn UserApi>,
    entropy: Mutex<Box<dyn RngCore + Send>>,
    drafts: Mutex<Drafts>,
}

/// A task's final state as seen by a waiting user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub status: TaskStatus,
    pub client_id: ClientId,
    /// Ordered by seq.
    pub results: Vec<ResultRecord>,
    pub error_log: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AwaitOutcome {
    pub tasks: BTreeMap<DocumentId, TaskOutcome>,
    /// The deadline passed first; `tasks` is a snapshot.
    pub timed_out: bool,
}

fn invalid(msg: impl Into<String>) -> ApiError {
    ApiError::invalid_argument(msg)
}

impl UserClient {
    pub fn new(api: Arc<dyn UserApi>) -> Self {
        Self::with_entropy(api, Box::new(rand::rngs::OsRng))
    }

    /// Document ids are drawn from `entropy`; a seeded generator makes
    /// batches reproducible.
    pub fn with_entropy(api: Arc<dyn UserApi>, entropy: Box<dyn RngCore + Send>) -> Self {
        Self { api, entropy: Mutex::new(entropy), drafts: Mutex::new(Drafts::default()) }
    }

    pub fn connect(cfg: &UserConfig) -> Self {
        Self::new(Arc::new(RemoteApi::new(cfg)))
    }

    fn add(&self, content: DraftContent) -> Result<DocumentId, ApiError> {
        let id = DocumentId::generate(&mut **self.entropy.lock()).map_err(|e| ApiError::unavailable(e.to_string()))?;
        let mut d = self.drafts.lock();
        d.order.push(id);
        d.docs.insert(id, DocumentDraft { id, content, committed: false });
        Ok(id)
    }

    fn kind_of(&self, id: DocumentId) -> Option<DraftContent> {
        self.drafts.lock().docs.get(&id).map(|d| d.content.clone())
    }

    pub fn draft(&self, id: DocumentId) -> Option<DocumentDraft> {
        self.drafts.lock().docs.get(&id).cloned()
    }

    pub fn payload(&self, body: impl Into<String>, name: impl Into<String>) -> Result<DocumentId, ApiError> {
        let body = body.into();
        if body.trim().is_empty() {
            return Err(invalid("payload body is empty"));
        }
        self.add(DraftContent::Payload { name: name.into(), body })
    }

    pub fn parameters(&self, value: TreeValue) -> Result<DocumentId, ApiError> {
        self.add(DraftContent::Parameters { value })
    }

    /// `payload` and `parameters` may be drafts of this client or ids of
    /// documents committed earlier.
    pub fn task(
        &self,
        client: &ClientId,
        payload: DocumentId,
        parameters: Option<DocumentId>,
    ) -> Result<DocumentId, ApiError> {
        if matches!(self.kind_of(payload), Some(c) if !matches!(c, DraftContent::Payload { .. })) {
            return Err(invalid(format!("{payload} is not a payload")));
        }
        if let Some(p) = parameters {
            if matches!(self.kind_of(p), Some(c) if !matches!(c, DraftContent::Parameters { .. })) {
                return Err(invalid(format!("{p} is not a parameters document")));
            }
        }
        self.add(DraftContent::Task {
            client_id: client.clone(),
            payload_id: payload,
            parameters_id: parameters,
            assignment_id: None,
        })
    }

    pub fn assignment(&self, name: impl Into<String>, tasks: &[DocumentId]) -> Result<Assignment<'_>, ApiError> {
        let id = DocumentId::generate(&mut **self.entropy.lock()).map_err(|e| ApiError::unavailable(e.to_string()))?;
        let mut d = self.drafts.lock();
        for t in tasks {
            match d.docs.get(t).map(|d| &d.content) {
                Some(DraftContent::Task { assignment_id: None, .. }) => {}
                Some(DraftContent::Task { .. }) => return Err(invalid(format!("task {t} already belongs to an assignment"))),
                _ => return Err(invalid(format!("{t} is not a task draft"))),
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        if !tasks.iter().all(|t| seen.insert(*t)) {
            return Err(invalid("a task is listed twice"));
        }
        for t in tasks {
            if let Some(DraftContent::Task { assignment_id, .. }) = d.docs.get_mut(t).map(|d| &mut d.content) {
                *assignment_id = Some(id);
            }
        }
        d.order.push(id);
        d.docs.insert(
            id,
            DocumentDraft { id, content: DraftContent::Assignment { name: name.into(), task_ids: tasks.to_vec() }, committed: false },
        );
        Ok(Assignment { user: self, id })
    }

    /// Every uncommitted document `root` needs, in one batch: payloads and
    /// parameters in draft order, then tasks in assignment order, then the
    /// assignment.
    pub fn build_batch(&self, root: DocumentId) -> Result<CommitBatch, ApiError> {
        let d = self.drafts.lock();
        let draft = d.docs.get(&root).ok_or_else(|| invalid(format!("{root} is not a draft")))?;
        let mut needed = std::collections::BTreeSet::new();
        let mut tasks = Vec::new();
        let mut assignment = None;
        match &draft.content {
            DraftContent::Payload { .. } | DraftContent::Parameters { .. } => {
                needed.insert(root);
            }
            DraftContent::Task { .. } => {
                return Err(invalid("tasks are committed through their assignment"));
            }
            DraftContent::Assignment { name, task_ids } => {
                for t in task_ids {
                    let Some(DraftContent::Task { client_id, payload_id, parameters_id, .. }) = d.docs.get(t).map(|x| &x.content)
                    else {
                        return Err(invalid(format!("{t} is not a task draft")));
                    };
                    needed.insert(*payload_id);
                    needed.extend(*parameters_id);
                    tasks.push(NewTask {
                        id: *t,
                        assignment_id: root,
                        client_id: client_id.clone(),
                        payload_id: *payload_id,
                        parameters_id: *parameters_id,
                    });
                }
                assignment = Some(NewAssignment { id: root, name: name.clone(), task_ids: task_ids.clone() });
            }
        }
        let mut batch = CommitBatch::default();
        for id in &d.order {
            if !needed.contains(id) {
                continue;
            }
            let doc = &d.docs[id];
            if doc.committed {
                continue;
            }
            match &doc.content {
                DraftContent::Payload { name, body } => {
                    batch.payloads.push(NewPayload { id: *id, name: name.clone(), body: body.clone() })
                }
                DraftContent::Parameters { value } => {
                    batch.parameters.push(NewParameters { id: *id, value: value.clone() })
                }
                _ => {}
            }
        }
        if !draft.committed {
            batch.tasks = tasks;
            batch.assignments.extend(assignment);
        }
        Ok(batch)
    }

    /// Commits `root` with everything it references that is still a draft.
    /// Committing again is a no-op.
    pub fn commit(&self, root: DocumentId) -> Result<(), ApiError> {
        let batch = self.build_batch(root)?;
        if batch.is_empty() {
            return Ok(());
        }
        let ids = batch.ids();
        self.api.commit(batch)?;
        let mut d = self.drafts.lock();
        for id in ids {
            if let Some(doc) = d.docs.get_mut(&id) {
                doc.committed = true;
            }
        }
        Ok(())
    }

    pub fn cancel(&self, task: DocumentId) -> Result<(), ApiError> {
        self.api.cancel(task)
    }

    pub fn list_clients(&self, online_only: bool) -> Result<Vec<ClientDescriptor>, ApiError> {
        match self.api.query(&QueryFilter::clients(online_only))? {
            QueryResult::Clients(c) => Ok(c),
            other => Err(unexpected(other)),
        }
    }

    pub fn query(&self, filter: &QueryFilter) -> Result<QueryResult, ApiError> {
        self.api.query(filter)
    }

    pub fn tasks_of(&self, assignment: DocumentId) -> Result<Vec<TaskDoc>, ApiError> {
        match self.api.query(&QueryFilter::tasks_of(assignment))? {
            QueryResult::Tasks(t) => Ok(t),
            other => Err(unexpected(other)),
        }
    }

    pub fn results_of(&self, assignment: DocumentId) -> Result<Vec<ResultRecord>, ApiError> {
        match self.api.query(&QueryFilter::results_of_assignment(assignment))? {
            QueryResult::Results(r) => Ok(r),
            other => Err(unexpected(other)),
        }
    }

    /// Current statuses and results of every task of an assignment.
    pub fn snapshot(&self, assignment: DocumentId) -> Result<BTreeMap<DocumentId, TaskOutcome>, ApiError> {
        let tasks = self.tasks_of(assignment)?;
        let mut results: BTreeMap<DocumentId, Vec<ResultRecord>> = BTreeMap::new();
        for r in self.results_of(assignment)? {
            results.entry(r.task_id).or_default().push(r);
        }
        Ok(tasks
            .into_iter()
            .map(|t| {
                let mut rs = results.remove(&t.id).unwrap_or_default();
                rs.sort_by_key(|r| r.seq);
                (t.id, TaskOutcome { status: t.status, client_id: t.client_id, results: rs, error_log: t.error_log })
            })
            .collect())
    }

    /// Blocks until every task of `assignment` is terminal, then returns
    /// all results. Status events wake it early; the task list is re-read
    /// every second regardless, since the bus may drop events.
    pub fn await_results(&self, assignment: DocumentId, timeout: Duration) -> Result<AwaitOutcome, ApiError> {
        let deadline = Instant::now() + timeout;
        let mut sub = self.api.subscribe(assignment).ok();
        loop {
            let tasks = self.tasks_of(assignment)?;
            if tasks.iter().all(|t| t.status.is_terminal()) {
                return Ok(AwaitOutcome { tasks: self.snapshot(assignment)?, timed_out: false });
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(AwaitOutcome { tasks: self.snapshot(assignment)?, timed_out: true });
            }
            let wait = (deadline - now).min(POLL_INTERVAL);
            match &sub {
                Some(s) => {
                    let until = Instant::now() + wait;
                    loop {
                        match s.recv_timeout(until.saturating_duration_since(Instant::now())) {
                            Ok(UserEvent::Status { .. }) => break,
                            Ok(UserEvent::Result { .. }) => continue,
                            Err(RecvTimeoutError::Timeout) => break,
                            Err(RecvTimeoutError::Disconnected) => {
                                sub = None;
                                break;
                            }
                        }
                    }
                }
                None => {
                    std::thread::sleep(wait);
                    sub = self.api.subscribe(assignment).ok();
                }
            }
        }
    }

    pub fn stream(&self, assignment: DocumentId) -> EventStream<'_> {
        EventStream {
            user: self,
            assignment,
            sub: None,
            queue: VecDeque::new(),
            next_seq: BTreeMap::new(),
            statuses: BTreeMap::new(),
            primed: false,
        }
    }
}

fn unexpected(r: QueryResult) -> ApiError {
    ApiError::new(ErrorCode::Unavailable, format!("unexpected query result {r:?}"))
}

/// A committed (or draft) assignment, for chaining.
#[derive(Clone, Copy)]
pub struct Assignment<'a> {
    user: &'a UserClient,
    pub id: DocumentId,
}

impl<'a> Assignment<'a> {
    pub fn commit(self) -> Result<Self, ApiError> {
        self.user.commit(self.id)?;
        Ok(self)
    }

    pub fn await_results(self, timeout: Duration) -> Result<AwaitOutcome, ApiError> {
        self.user.await_results(self.id, timeout)
    }

    pub fn stream(self) -> EventStream<'a> {
        self.user.stream(self.id)
    }

    pub fn tasks(&self) -> Vec<DocumentId> {
        match self.user.draft(self.id).map(|d| d.content) {
            Some(DraftContent::Assignment { task_ids, .. }) => task_ids,
            _ => Vec::new(),
        }
    }
}

/// Result and status events of one assignment, in arrival order, each
/// yielded once. After a disconnect it resubscribes and fills the gap from
/// a query. Ends once every task is terminal and everything was yielded.
pub struct EventStream<'a> {
    user: &'a UserClient,
    assignment: DocumentId,
    sub: Option<Subscription<UserEvent>>,
    queue: VecDeque<UserEvent>,
    next_seq: BTreeMap<DocumentId, u64>,
    statuses: BTreeMap<DocumentId, TaskStatus>,
    primed: bool,
}

impl EventStream<'_> {
    /// Keeps events not yet yielded.
    fn admit(&mut self, ev: UserEvent) {
        match &ev {
            UserEvent::Result { task_id, seq, .. } => {
                let next = self.next_seq.entry(*task_id).or_insert(0);
                if *seq < *next {
                    return;
                }
                *next = seq + 1;
            }
            UserEvent::Status { task_id, status } => {
                if self.statuses.get(task_id) == Some(status) {
                    return;
                }
                self.statuses.insert(*task_id, *status);
            }
        }
        self.queue.push_back(ev);
    }

    /// Queues whatever the store has that was not yet yielded.
    fn fill_gap(&mut self) -> Result<(), ApiError> {
        let snapshot = self.user.snapshot(self.assignment)?;
        for (task_id, outcome) in snapshot {
            self.statuses.entry(task_id).or_insert(TaskStatus::Active);
            for r in outcome.results {
                self.admit(UserEvent::Result { task_id, seq: r.seq, value: r.value });
            }
            if outcome.status.is_terminal() {
                self.admit(UserEvent::Status { task_id, status: outcome.status });
            }
        }
        Ok(())
    }

    fn done(&self) -> bool {
        self.primed && self.queue.is_empty() && self.statuses.values().all(|s| s.is_terminal())
    }

    /// Next event, or `Ok(None)` if none arrived within `timeout` or the
    /// stream is complete.
    pub fn next_timeout(&mut self, timeout: Duration) -> Result<Option<UserEvent>, ApiError> {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(ev) = self.queue.pop_front() {
                return Ok(Some(ev));
            }
            if self.done() {
                return Ok(None);
            }
            if self.sub.is_none() {
                // Subscribe before reading the store so nothing falls between.
                self.sub = self.user.api.subscribe(self.assignment).ok();
                self.fill_gap()?;
                self.primed = true;
                continue;
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(None);
            }
            let wait = (deadline - now).min(POLL_INTERVAL);
            match self.sub.as_ref().unwrap().recv_timeout(wait) {
                Ok(ev) => self.admit(ev),
                Err(RecvTimeoutError::Timeout) => self.fill_gap()?,
                Err(RecvTimeoutError::Disconnected) => {
                    self.sub = None;
                    std::thread::sleep(Duration::from_millis(100));
                }
            }
        }
    }

    pub fn is_complete(&self) -> bool {
        self.done()
    }
}

impl Iterator for EventStream<'_> {
    type Item = Result<UserEvent, ApiError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            match self.next_timeout(Duration::from_secs(3600)) {
                Ok(Some(ev)) => return Some(Ok(ev)),
                Ok(None) if self.done() => return None,
                Ok(None) => continue,
                Err(e) => return Some(Err(e)),
            }
        }
    }
}
