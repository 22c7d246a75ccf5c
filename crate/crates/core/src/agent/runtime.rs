//! The agent process: an event loop thread driving [`AgentState`] plus the
//! activities it spawns.
//!
//! Threads:
//!
//! - loop: the only writer of the agent state; executes effects.
//! - bus: follows the client's clock topic, resubscribing with backoff.
//! - heartbeat: periodic state fetches that keep the client online and
//!   feed the fetched clock back in case a notification was lost.
//! - one short-lived thread per fetch, submit and reconciliation.
//! - per sandbox, the threads [`Sandbox`] runs itself.

use super::cache::DurableCache;
use super::config::{AgentConfig, Backoff};
use super::doc_cache::{DocCache, DEFAULT_DOC_CACHE_ENTRIES};
use super::sync_loop::{plan_reconcile, AgentEvent, AgentState, Effect, LocalSync, LocalView, StartPlan, TaskOutput};
use crate::bus::{ClockFeed, RemoteBus};
use crate::clock::{Clock, SystemClock};
use crate::error::ApiError;
use crate::model::{
    ClientId, ClientStateSnapshot, DocumentId, Millis, ParametersDoc, PayloadDoc, SubmitBatch, TaskStatus, TreeValue,
};
use crate::rpc::RpcClient;
use crate::sandbox::{
    install_payload_lib, make_traversable, Delivery, OutputSink, Sandbox, SandboxContext, SandboxSpec, UidPool,
};
use crate::server::{method, FetchStateParams, GetParametersParams, GetPayloadParams, ServerNode};
use crate::signal::{Ingest, SignalCache};
use parking_lot::{Condvar, Mutex};
use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, OnceLock, Weak};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

pub const OUTBOX_FILE: &str = "outbox.ndjson";
pub const TASKS_DIR: &str = "tasks";
pub const DOCS_DIR: &str = "docs";
pub const LIB_DIR: &str = "lib";

/// Per-task uids handed out when running as root, shared by every agent in
/// the process.
fn uid_pool() -> Option<&'static UidPool> {
    static POOL: OnceLock<Option<UidPool>> = OnceLock::new();
    POOL.get_or_init(|| UidPool::if_privileged(200_000..210_000)).as_ref()
}

/// The agent's view of the server.
pub trait ServerLink: Send + Sync {
    fn fetch_state(&self, client: &ClientId) -> Result<ClientStateSnapshot, ApiError>;
    fn submit(&self, batch: SubmitBatch) -> Result<ClientStateSnapshot, ApiError>;
    fn get_payload(&self, id: DocumentId) -> Result<PayloadDoc, ApiError>;
    fn get_parameters(&self, id: DocumentId) -> Result<ParametersDoc, ApiError>;
}

pub struct RpcLink(pub RpcClient);

impl ServerLink for RpcLink {
    fn fetch_state(&self, client: &ClientId) -> Result<ClientStateSnapshot, ApiError> {
        self.0.call(method::FETCH_STATE, &FetchStateParams { client_id: client.clone() })
    }

    fn submit(&self, batch: SubmitBatch) -> Result<ClientStateSnapshot, ApiError> {
        self.0.call(method::SUBMIT, &batch)
    }

    fn get_payload(&self, id: DocumentId) -> Result<PayloadDoc, ApiError> {
        self.0.call(method::GET_PAYLOAD, &GetPayloadParams { payload_id: id })
    }

    fn get_parameters(&self, id: DocumentId) -> Result<ParametersDoc, ApiError> {
        self.0.call(method::GET_PARAMETERS, &GetParametersParams { parameters_id: id })
    }
}

/// Calls a server node directly, skipping the wire.
pub struct InProcessLink {
    pub node: ServerNode,
    pub token: String,
}

impl ServerLink for InProcessLink {
    fn fetch_state(&self, client: &ClientId) -> Result<ClientStateSnapshot, ApiError> {
        self.node.fetch_state(&self.token, client)
    }

    fn submit(&self, batch: SubmitBatch) -> Result<ClientStateSnapshot, ApiError> {
        self.node.submit(&self.token, batch)
    }

    fn get_payload(&self, id: DocumentId) -> Result<PayloadDoc, ApiError> {
        self.node.get_payload(&self.token, id)
    }

    fn get_parameters(&self, id: DocumentId) -> Result<ParametersDoc, ApiError> {
        self.node.get_parameters(&self.token, id)
    }
}

pub struct AgentDeps {
    pub link: Arc<dyn ServerLink>,
    pub feed: Arc<dyn ClockFeed>,
    pub signals: Arc<SignalCache>,
    pub clock: Arc<dyn Clock>,
}

impl AgentDeps {
    /// Network transports as named in the configuration.
    pub fn from_config(cfg: &AgentConfig) -> Self {
        Self {
            link: Arc::new(RpcLink(RpcClient::new(&cfg.server_addr, &cfg.token))),
            feed: Arc::new(RemoteBus::new(&cfg.bus_addr)),
            signals: Arc::new(SignalCache::new()),
            clock: Arc::new(SystemClock),
        }
    }
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum AgentError {
    #[error("agent setup failed: {0}")]
    Setup(String),
    #[error("server refused the agent: {0}")]
    Fatal(ApiError),
}

#[derive(Debug, Default)]
pub struct AgentCounters {
    pub events: AtomicU64,
    pub fetches: AtomicU64,
    pub submits: AtomicU64,
    pub reconciles: AtomicU64,
    pub starts: AtomicU64,
    pub stops: AtomicU64,
    pub start_failures: AtomicU64,
}

impl AgentCounters {
    pub fn get(c: &AtomicU64) -> u64 {
        c.load(Ordering::SeqCst)
    }
}

enum LoopMsg {
    Event(AgentEvent),
    /// Reconcile now; task starts were paused.
    Resync,
    Fatal(ApiError),
    Shutdown,
}

struct Running {
    sandbox: Arc<Sandbox>,
    uid: Option<u32>,
}

enum LaunchError {
    Stopping,
    Failed(String),
}

struct Shared {
    cfg: AgentConfig,
    link: Arc<dyn ServerLink>,
    feed: Arc<dyn ClockFeed>,
    signals: Arc<SignalCache>,
    clock: Arc<dyn Clock>,
    cache: DurableCache,
    docs: DocCache,
    lib_dir: PathBuf,
    tasks_dir: PathBuf,
    uids: Option<&'static UidPool>,
    tx: Sender<LoopMsg>,
    running: Mutex<HashMap<DocumentId, Running>>,
    traces: Mutex<HashMap<DocumentId, Vec<Delivery>>>,
    state: Mutex<AgentState>,
    state_changed: Condvar,
    stopping: AtomicBool,
    wake_lock: Mutex<()>,
    wake: Condvar,
    starts_paused: AtomicBool,
    counters: AgentCounters,
}

pub struct Agent {
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
    event_loop: Option<JoinHandle<Result<(), AgentError>>>,
    _ingest: Vec<Ingest>,
    halted: bool,
}

struct AgentSink {
    shared: Weak<Shared>,
}

impl OutputSink for AgentSink {
    fn result(&self, task_id: DocumentId, seq: u64, value: TreeValue, produced_at: Millis) -> std::io::Result<()> {
        let Some(s) = self.shared.upgrade() else {
            return Err(std::io::Error::new(std::io::ErrorKind::BrokenPipe, "agent gone"));
        };
        s.cache.record_result(task_id, seq, value.clone(), produced_at)?;
        s.send(LoopMsg::Event(AgentEvent::TaskOutput {
            task_id,
            output: TaskOutput::Result { seq, value, produced_at },
        }));
        Ok(())
    }

    fn status(&self, task_id: DocumentId, status: TaskStatus, error_log: Option<String>) {
        let Some(s) = self.shared.upgrade() else { return };
        if let Err(e) = s.cache.record_status(task_id, status, error_log.clone()) {
            tracing::warn!(task = %task_id, error = %e, "status not persisted");
        }
        if let Some(r) = s.running.lock().remove(&task_id) {
            s.traces.lock().insert(task_id, r.sandbox.signal_trace());
            s.release_uid(r.uid);
        }
        s.send(LoopMsg::Event(AgentEvent::TaskOutput { task_id, output: TaskOutput::Status { status, error_log } }));
    }
}

impl Shared {
    fn send(&self, msg: LoopMsg) {
        let _ = self.tx.send(msg);
    }

    fn stopping(&self) -> bool {
        self.stopping.load(Ordering::SeqCst)
    }

    /// Sleeps unless the agent stops first; false if it did.
    fn pause(&self, d: Duration) -> bool {
        let deadline = Instant::now() + d;
        let mut g = self.wake_lock.lock();
        while !self.stopping() {
            if self.wake.wait_until(&mut g, deadline).timed_out() {
                break;
            }
        }
        !self.stopping()
    }

    fn release_uid(&self, uid: Option<u32>) {
        if let (Some(pool), Some(uid)) = (self.uids, uid) {
            pool.release(uid);
        }
    }

    /// `Ok(None)` if the agent stopped while retrying.
    fn with_retry<T>(&self, what: &str, mut call: impl FnMut() -> Result<T, ApiError>) -> Result<Option<T>, ApiError> {
        let mut backoff = Backoff::new(self.cfg.retry);
        let mut rng = rand::thread_rng();
        loop {
            if self.stopping() {
                return Ok(None);
            }
            match call() {
                Ok(v) => return Ok(Some(v)),
                Err(e) if e.is_retryable() => {
                    let delay = backoff.next_delay(&mut rng);
                    tracing::warn!(what, error = %e, attempt = backoff.attempt(), ?delay, "retrying");
                    if !self.pause(delay) {
                        return Ok(None);
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn execute(self: &Arc<Self>, effects: Vec<Effect>) {
        for effect in effects {
            match effect {
                Effect::FetchState => {
                    self.counters.fetches.fetch_add(1, Ordering::SeqCst);
                    let s = self.clone();
                    spawn("agent-fetch", move || {
                        let client = s.cfg.client_id.clone();
                        match s.with_retry("fetch state", || s.link.fetch_state(&client)) {
                            Ok(Some(snap)) => s.send(LoopMsg::Event(AgentEvent::NewState(snap))),
                            Ok(None) => {}
                            Err(e) => s.send(LoopMsg::Fatal(e)),
                        }
                    });
                }
                Effect::Submit(plan) => {
                    self.counters.submits.fetch_add(1, Ordering::SeqCst);
                    let s = self.clone();
                    spawn("agent-submit", move || {
                        let batch = SubmitBatch {
                            client_id: s.cfg.client_id.clone(),
                            results: plan.results,
                            statuses: plan.statuses,
                        };
                        match s.with_retry("submit", || s.link.submit(batch.clone())) {
                            Ok(Some(snap)) => s.send(LoopMsg::Event(AgentEvent::NewState(snap))),
                            Ok(None) => {}
                            Err(e) => s.send(LoopMsg::Fatal(e)),
                        }
                    });
                }
                Effect::SyncContainers { snapshot, locals } => {
                    self.counters.reconciles.fetch_add(1, Ordering::SeqCst);
                    let s = self.clone();
                    spawn("agent-reconcile", move || {
                        let sync = s.reconcile(&snapshot, &locals);
                        s.send(LoopMsg::Event(AgentEvent::LocalTasksSynced(sync)));
                    });
                }
                Effect::Confirmed { task_id, count } => self.cache.confirm(task_id, count),
                Effect::Forget { task_id } => self.cache.forget(task_id),
            }
        }
    }

    fn reconcile(self: &Arc<Self>, snapshot: &ClientStateSnapshot, locals: &BTreeMap<DocumentId, LocalView>) -> LocalSync {
        let plan = plan_reconcile(snapshot, locals);
        let mut sync = LocalSync::default();

        let doomed: Vec<Running> = {
            let mut reg = self.running.lock();
            let mut ids: Vec<DocumentId> = reg.keys().filter(|id| snapshot.task(id).is_none()).copied().collect();
            ids.extend(plan.stop.iter().copied());
            ids.sort();
            ids.dedup();
            ids.iter().filter_map(|id| reg.remove(id)).collect()
        };
        let grace = self.cfg.grace();
        std::thread::scope(|scope| {
            for r in &doomed {
                scope.spawn(move || r.sandbox.stop(grace));
            }
        });
        for r in doomed {
            tracing::info!(task = %r.sandbox.task_id(), "stopped canceled task");
            self.counters.stops.fetch_add(1, Ordering::SeqCst);
            self.traces.lock().insert(r.sandbox.task_id(), r.sandbox.signal_trace());
            self.release_uid(r.uid);
        }
        sync.stopped = plan.stop.clone();

        let paused = self.cache.is_degraded() && !self.cache.probe();
        self.starts_paused.store(paused && !plan.start.is_empty(), Ordering::SeqCst);
        if paused {
            tracing::warn!(pending = plan.start.len(), "outbox unwritable; not starting tasks");
        } else {
            for start in &plan.start {
                let id = start.task.task_id;
                if self.running.lock().contains_key(&id) {
                    continue;
                }
                match self.launch(start) {
                    Ok(()) => {
                        self.counters.starts.fetch_add(1, Ordering::SeqCst);
                        sync.started.push(id);
                    }
                    Err(LaunchError::Stopping) => break,
                    Err(LaunchError::Failed(msg)) => {
                        tracing::warn!(task = %id, error = %msg, "task failed to start");
                        self.counters.start_failures.fetch_add(1, Ordering::SeqCst);
                        let sink = AgentSink { shared: Arc::downgrade(self) };
                        sink.status(id, TaskStatus::Error, Some(msg));
                    }
                }
            }
        }

        self.remove_orphans(snapshot);
        sync
    }

    fn payload(&self, id: DocumentId) -> Result<PayloadDoc, LaunchError> {
        if let Some(doc) = self.docs.payload(id) {
            return Ok(doc);
        }
        match self.with_retry("get payload", || self.link.get_payload(id)) {
            Ok(Some(doc)) => {
                self.docs.put_payload(&doc);
                Ok(doc)
            }
            Ok(None) => Err(LaunchError::Stopping),
            Err(e) => Err(LaunchError::Failed(format!("could not fetch payload {id}: {e}"))),
        }
    }

    fn parameters(&self, id: DocumentId) -> Result<ParametersDoc, LaunchError> {
        if let Some(doc) = self.docs.parameters(id) {
            return Ok(doc);
        }
        match self.with_retry("get parameters", || self.link.get_parameters(id)) {
            Ok(Some(doc)) => {
                self.docs.put_parameters(&doc);
                Ok(doc)
            }
            Ok(None) => Err(LaunchError::Stopping),
            Err(e) => Err(LaunchError::Failed(format!("could not fetch parameters {id}: {e}"))),
        }
    }

    fn launch(self: &Arc<Self>, start: &StartPlan) -> Result<(), LaunchError> {
        let task = &start.task;
        let payload = self.payload(task.payload_id)?;
        let parameters = match task.parameters_id {
            Some(pid) => Some(self.parameters(pid)?.value),
            None => None,
        };
        let mut env = self.cfg.sandbox.env.clone();
        let lib = self.lib_dir.display().to_string();
        let pythonpath = match env.get("PYTHONPATH") {
            Some(p) if !p.is_empty() => format!("{lib}:{p}"),
            _ => lib,
        };
        env.insert("PYTHONPATH".into(), pythonpath);

        // Holding the registry across the start keeps the supervisor's
        // exit report from racing the insertion, and shutdown from
        // missing a sandbox.
        let mut reg = self.running.lock();
        if self.stopping() {
            return Err(LaunchError::Stopping);
        }
        let uid = if self.cfg.sandbox.isolate { self.uids.and_then(|p| p.acquire()) } else { None };
        let spec = SandboxSpec {
            task_id: task.task_id,
            payload_body: payload.body,
            parameters,
            interpreter: self.cfg.sandbox.python_cmd.clone(),
            env,
            limits: self.cfg.sandbox.limits,
            workdir: self.tasks_dir.join(task.task_id.to_string()),
            base_seq: start.base_seq,
            uid,
        };
        let ctx = SandboxContext {
            signals: self.signals.clone(),
            sink: Arc::new(AgentSink { shared: Arc::downgrade(self) }),
            clock: self.clock.clone(),
        };
        match Sandbox::start(spec, ctx) {
            Ok(sb) => {
                tracing::info!(task = %task.task_id, base_seq = start.base_seq, "started task");
                reg.insert(task.task_id, Running { sandbox: Arc::new(sb), uid });
                Ok(())
            }
            Err(e) => {
                self.release_uid(uid);
                Err(LaunchError::Failed(e.to_string()))
            }
        }
    }

    /// Workdirs of tasks that are neither running nor active on the server
    /// (canceled while the agent was down, say).
    fn remove_orphans(&self, snapshot: &ClientStateSnapshot) {
        let Ok(entries) = std::fs::read_dir(&self.tasks_dir) else { return };
        let reg = self.running.lock();
        for entry in entries.flatten() {
            let name = entry.file_name();
            let Ok(id) = name.to_string_lossy().parse::<DocumentId>() else { continue };
            if snapshot.task(&id).is_none() && !reg.contains_key(&id) {
                tracing::info!(task = %id, "removing leftover workdir");
                let _ = std::fs::remove_dir_all(entry.path());
            }
        }
    }

    fn follow_bus(&self) {
        let mut backoff = Backoff::new(self.cfg.retry);
        let mut rng = rand::thread_rng();
        while !self.stopping() {
            match self.feed.subscribe_clock(&self.cfg.client_id) {
                Ok(sub) => {
                    backoff.reset();
                    loop {
                        if self.stopping() {
                            return;
                        }
                        match sub.recv_timeout(Duration::from_millis(200)) {
                            Ok(n) => self.send(LoopMsg::Event(AgentEvent::ClockFromBus { ts: n.ts })),
                            Err(RecvTimeoutError::Timeout) => {}
                            Err(RecvTimeoutError::Disconnected) => break,
                        }
                    }
                    tracing::warn!("clock subscription ended; resubscribing");
                }
                Err(e) => tracing::warn!(error = %e, "clock subscription failed"),
            }
            if !self.pause(backoff.next_delay(&mut rng)) {
                return;
            }
        }
    }

    fn heartbeat(&self, every: Duration) {
        while self.pause(every) {
            match self.link.fetch_state(&self.cfg.client_id) {
                Ok(s) => self.send(LoopMsg::Event(AgentEvent::ClockFromBus { ts: s.ts })),
                Err(e) => tracing::debug!(error = %e, "heartbeat fetch failed"),
            }
            if self.starts_paused.load(Ordering::SeqCst) && self.cache.probe() {
                self.starts_paused.store(false, Ordering::SeqCst);
                self.send(LoopMsg::Resync);
            }
        }
    }

    fn run_loop(self: &Arc<Self>, rx: Receiver<LoopMsg>, initial: Vec<Effect>) -> Result<(), AgentError> {
        self.execute(initial);
        for msg in rx {
            let effects = match msg {
                LoopMsg::Event(ev) => {
                    self.counters.events.fetch_add(1, Ordering::SeqCst);
                    self.state.lock().handle_event(ev)
                }
                LoopMsg::Resync => self.state.lock().request_local_sync(),
                LoopMsg::Fatal(e) => {
                    tracing::error!(error = %e, "fatal server error");
                    self.state_changed.notify_all();
                    return Err(AgentError::Fatal(e));
                }
                LoopMsg::Shutdown => break,
            };
            self.state_changed.notify_all();
            if !self.stopping() {
                self.execute(effects);
            }
        }
        self.state_changed.notify_all();
        Ok(())
    }
}

fn spawn(name: &str, f: impl FnOnce() + Send + 'static) -> JoinHandle<()> {
    std::thread::Builder::new().name(name.into()).spawn(f).expect("thread spawn")
}

impl Agent {
    pub fn start(cfg: AgentConfig, deps: AgentDeps) -> Result<Agent, AgentError> {
        let setup = |what: &str, e: std::io::Error| AgentError::Setup(format!("{what}: {e}"));
        let data_dir = cfg.data_dir.clone();
        std::fs::create_dir_all(&data_dir).map_err(|e| setup("data dir", e))?;
        let uids = if cfg.sandbox.isolate { uid_pool() } else { None };
        let tasks_dir = data_dir.join(TASKS_DIR);
        std::fs::create_dir_all(&tasks_dir).map_err(|e| setup("tasks dir", e))?;
        if uids.is_some() {
            make_traversable(&data_dir).map_err(|e| setup("data dir", e))?;
            make_traversable(&tasks_dir).map_err(|e| setup("tasks dir", e))?;
        }
        let lib_dir = install_payload_lib(&data_dir.join(LIB_DIR)).map_err(|e| setup("payload library", e))?;
        let docs = DocCache::open(&data_dir.join(DOCS_DIR), DEFAULT_DOC_CACHE_ENTRIES).map_err(|e| setup("doc cache", e))?;
        let (cache, pending) = DurableCache::open(&data_dir.join(OUTBOX_FILE)).map_err(|e| setup("outbox", e))?;
        if !pending.is_empty() {
            tracing::info!(tasks = pending.len(), "replaying cached task outputs");
        }
        let (state, initial) = AgentState::recovered(pending);
        let ingest = cfg.signals.iter().map(|s| Ingest::spawn(s.build(), deps.signals.clone())).collect();
        let (tx, rx) = mpsc::channel();
        let heartbeat = cfg.heartbeat();
        let shared = Arc::new(Shared {
            cfg,
            link: deps.link,
            feed: deps.feed,
            signals: deps.signals,
            clock: deps.clock,
            cache,
            docs,
            lib_dir,
            tasks_dir,
            uids,
            tx,
            running: Mutex::new(HashMap::new()),
            traces: Mutex::new(HashMap::new()),
            state: Mutex::new(state),
            state_changed: Condvar::new(),
            stopping: AtomicBool::new(false),
            wake_lock: Mutex::new(()),
            wake: Condvar::new(),
            starts_paused: AtomicBool::new(false),
            counters: AgentCounters::default(),
        });
        let s = shared.clone();
        let event_loop = std::thread::Builder::new()
            .name("agent-loop".into())
            .spawn(move || s.run_loop(rx, initial))
            .map_err(|e| setup("loop thread", e))?;
        let mut threads = Vec::new();
        let s = shared.clone();
        threads.push(spawn("agent-bus", move || s.follow_bus()));
        if let Some(every) = heartbeat {
            let s = shared.clone();
            threads.push(spawn("agent-heartbeat", move || s.heartbeat(every)));
        }
        Ok(Agent { shared, threads, event_loop: Some(event_loop), _ingest: ingest, halted: false })
    }

    /// Lets another thread (a signal handler, say) end [`Agent::wait`].
    pub fn stop_handle(&self) -> StopHandle {
        StopHandle(self.shared.tx.clone())
    }

    pub fn client_id(&self) -> &ClientId {
        &self.shared.cfg.client_id
    }

    pub fn data_dir(&self) -> &Path {
        &self.shared.cfg.data_dir
    }

    pub fn state(&self) -> AgentState {
        self.shared.state.lock().clone()
    }

    /// Blocks until `pred` holds for the agent state or `timeout` passes.
    pub fn wait_for(&self, timeout: Duration, pred: impl Fn(&AgentState) -> bool) -> bool {
        let deadline = Instant::now() + timeout;
        let mut st = self.shared.state.lock();
        loop {
            if pred(&st) {
                return true;
            }
            let slice = deadline.saturating_duration_since(Instant::now()).min(Duration::from_millis(50));
            if slice.is_zero() {
                return false;
            }
            self.shared.state_changed.wait_for(&mut st, slice);
        }
    }

    pub fn counters(&self) -> &AgentCounters {
        &self.shared.counters
    }

    pub fn running_tasks(&self) -> Vec<DocumentId> {
        let mut ids: Vec<_> = self.shared.running.lock().keys().copied().collect();
        ids.sort();
        ids
    }

    /// Signal values handed to a task's payload, in delivery order.
    pub fn signal_trace(&self, task: DocumentId) -> Option<Vec<Delivery>> {
        if let Some(r) = self.shared.running.lock().get(&task) {
            return Some(r.sandbox.signal_trace());
        }
        self.shared.traces.lock().get(&task).cloned()
    }

    pub fn signals(&self) -> &Arc<SignalCache> {
        &self.shared.signals
    }

    pub fn is_degraded(&self) -> bool {
        self.shared.cache.is_degraded()
    }

    pub fn is_finished(&self) -> bool {
        self.event_loop.as_ref().is_none_or(|h| h.is_finished())
    }

    fn halt(&mut self, crash: bool) -> Result<(), AgentError> {
        if self.halted {
            return Ok(());
        }
        self.halted = true;
        {
            let _g = self.shared.wake_lock.lock();
            self.shared.stopping.store(true, Ordering::SeqCst);
            self.shared.wake.notify_all();
        }
        let running: Vec<Running> = self.shared.running.lock().drain().map(|(_, r)| r).collect();
        for r in &running {
            r.sandbox.kill_preserving();
            self.shared.release_uid(r.uid);
        }
        if crash {
            self.shared.cache.close();
        }
        self.shared.send(LoopMsg::Shutdown);
        let result = match self.event_loop.take() {
            Some(h) => h.join().unwrap_or_else(|_| Err(AgentError::Setup("event loop panicked".into()))),
            None => Ok(()),
        };
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        self.shared.cache.close();
        result
    }

    /// Stops the agent: payload processes are killed but keep their
    /// workdirs, and anything unsubmitted stays in the outbox.
    pub fn shutdown(mut self) -> Result<(), AgentError> {
        self.halt(false)
    }

    /// Like [`Agent::shutdown`], but the outbox stops accepting writes
    /// first, as if the process had been killed.
    pub fn crash(mut self) {
        let _ = self.halt(true);
    }

    /// Blocks until the event loop exits, returning a fatal error if one
    /// stopped it.
    pub fn wait(mut self) -> Result<(), AgentError> {
        let result = match self.event_loop.take() {
            Some(h) => h.join().unwrap_or_else(|_| Err(AgentError::Setup("event loop panicked".into()))),
            None => Ok(()),
        };
        let _ = self.halt(false);
        result
    }
}

#[derive(Clone)]
pub struct StopHandle(Sender<LoopMsg>);

impl StopHandle {
    pub fn stop(&self) {
        let _ = self.0.send(LoopMsg::Shutdown);
    }
}

impl Drop for Agent {
    fn drop(&mut self) {
        let _ = self.halt(false);
    }
}
