use super::*;
use crate::bus::MemoryBus;
use crate::clock::SystemClock;
use crate::error::{ApiError, ErrorCode};
use crate::model::{
    ClientId, ClientStateSnapshot, CommitBatch, DocumentId, NewAssignment, NewPayload, NewTask, ParametersDoc,
    PayloadDoc, SubmitBatch, TaskStatus,
};
use crate::server::{Authenticator, ServerNode};
use crate::signal::SignalCache;
use crate::store::{MemoryStore, QueryFilter, QueryResult, StateStore};
use serde_json::json;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

fn id(n: u8) -> DocumentId {
    DocumentId::from_bytes([n; 16])
}

fn car() -> ClientId {
    ClientId::new("car").unwrap()
}

/// Fails submits while `block_submit` is set and the first
/// `failing_fetches` fetches.
struct FaultLink {
    inner: InProcessLink,
    block_submit: AtomicBool,
    failing_fetches: AtomicU64,
    fetch_calls: AtomicU64,
}

impl FaultLink {
    fn new(node: &ServerNode, token: &str) -> Arc<Self> {
        Arc::new(Self {
            inner: InProcessLink { node: node.clone(), token: token.into() },
            block_submit: AtomicBool::new(false),
            failing_fetches: AtomicU64::new(0),
            fetch_calls: AtomicU64::new(0),
        })
    }
}

impl ServerLink for FaultLink {
    fn fetch_state(&self, client: &ClientId) -> Result<ClientStateSnapshot, ApiError> {
        let n = self.fetch_calls.fetch_add(1, Ordering::SeqCst);
        if n < self.failing_fetches.load(Ordering::SeqCst) {
            return Err(ApiError::unavailable("link down"));
        }
        self.inner.fetch_state(client)
    }

    fn submit(&self, batch: SubmitBatch) -> Result<ClientStateSnapshot, ApiError> {
        if self.block_submit.load(Ordering::SeqCst) {
            return Err(ApiError::unavailable("link down"));
        }
        self.inner.submit(batch)
    }

    fn get_payload(&self, id: DocumentId) -> Result<PayloadDoc, ApiError> {
        self.inner.get_payload(id)
    }

    fn get_parameters(&self, id: DocumentId) -> Result<ParametersDoc, ApiError> {
        self.inner.get_parameters(id)
    }
}

struct Rig {
    store: Arc<MemoryStore>,
    bus: Arc<MemoryBus>,
    node: ServerNode,
    dir: tempfile::TempDir,
}

impl Rig {
    fn new() -> Self {
        let store = Arc::new(MemoryStore::new(Arc::new(SystemClock)));
        let bus = Arc::new(MemoryBus::new());
        let auth = Authenticator::new().with_client(car(), "tok-car").with_user("tok-user");
        let node = ServerNode::new(store.clone(), bus.clone(), auth).unwrap();
        Rig { store, bus, node, dir: tempfile::tempdir().unwrap() }
    }

    fn config(&self) -> AgentConfig {
        AgentConfig {
            client_id: car(),
            server_addr: String::new(),
            bus_addr: String::new(),
            token: "tok-car".into(),
            data_dir: self.dir.path().join("agent"),
            sandbox: SandboxConfig { grace_seconds: 1, ..Default::default() },
            online_window_s: 30,
            heartbeat_s: Some(0),
            signals: Vec::new(),
            retry: RetryConfig { base_ms: 20, cap_ms: 200 },
        }
    }

    fn start(&self, cfg: AgentConfig, link: Arc<dyn ServerLink>) -> Agent {
        let deps = AgentDeps {
            link,
            feed: self.bus.clone(),
            signals: Arc::new(SignalCache::new()),
            clock: Arc::new(SystemClock),
        };
        Agent::start(cfg, deps).unwrap()
    }

    fn link(&self) -> Arc<dyn ServerLink> {
        Arc::new(InProcessLink { node: self.node.clone(), token: "tok-car".into() })
    }

    /// Commits one task per `(task, payload)` pair, payload bodies given
    /// separately.
    fn commit(&self, payloads: &[(u8, &str)], tasks: &[(u8, u8)]) {
        let batch = CommitBatch {
            payloads: payloads
                .iter()
                .map(|(p, body)| NewPayload { id: id(*p), name: format!("p{p}"), body: (*body).into() })
                .collect(),
            parameters: vec![],
            tasks: tasks
                .iter()
                .map(|(t, p)| NewTask {
                    id: id(*t),
                    assignment_id: id(200),
                    client_id: car(),
                    payload_id: id(*p),
                    parameters_id: None,
                })
                .collect(),
            assignments: vec![NewAssignment {
                id: id(200),
                name: "a".into(),
                task_ids: tasks.iter().map(|(t, _)| id(*t)).collect(),
            }],
        };
        self.node.commit("tok-user", batch).unwrap();
    }

    fn wait_status(&self, task: u8, status: TaskStatus, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while Instant::now() < deadline {
            if self.store.get_task(id(task)).unwrap().status == status {
                return true;
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        false
    }

    fn results(&self, task: u8) -> Vec<(u64, serde_json::Value)> {
        match self.store.query(&QueryFilter::results_of_task(id(task))).unwrap() {
            QueryResult::Results(rs) => rs.into_iter().map(|r| (r.seq, r.value)).collect(),
            other => panic!("{other:?}"),
        }
    }
}

fn wait_until(timeout: Duration, f: impl Fn() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if f() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    f()
}

const SECS: Duration = Duration::from_secs(15);

#[test]
fn committed_task_runs_and_its_result_reaches_the_store() {
    let rig = Rig::new();
    let agent = rig.start(rig.config(), rig.link());
    assert!(agent.wait_for(SECS, |s| !s.syncing_state && !s.syncing_locals));
    rig.commit(&[(1, "import spada\nspada.publish({'x': 1})\n")], &[(10, 1)]);
    assert!(rig.wait_status(10, TaskStatus::Finished, SECS));
    assert_eq!(rig.results(10), vec![(0, json!({"x": 1}))]);
    let outbox = agent.data_dir().join(runtime::OUTBOX_FILE);
    assert!(wait_until(SECS, || std::fs::read(&outbox).unwrap().is_empty()));
    assert!(agent.wait_for(SECS, |s| s.local_tasks.is_empty()));
    assert!(!agent.data_dir().join("tasks").join(id(10).to_string()).exists());
    agent.shutdown().unwrap();
}

#[test]
fn shared_payload_is_fetched_once() {
    let rig = Rig::new();
    rig.commit(&[(1, "pass\n")], &[(10, 1), (11, 1)]);
    let agent = rig.start(rig.config(), rig.link());
    assert!(rig.wait_status(10, TaskStatus::Finished, SECS));
    assert!(rig.wait_status(11, TaskStatus::Finished, SECS));
    assert_eq!(rig.node.metrics().count("get_payload"), 1);
    drop(agent);
}

#[test]
fn cancel_stops_the_sandbox_without_a_status() {
    let rig = Rig::new();
    rig.commit(&[(1, "import time\nwhile True:\n    time.sleep(0.05)\n")], &[(10, 1)]);
    let agent = rig.start(rig.config(), rig.link());
    assert!(wait_until(SECS, || agent.running_tasks() == vec![id(10)]));
    let t0 = Instant::now();
    rig.node.cancel("tok-user", id(10)).unwrap();
    assert!(wait_until(SECS, || agent.running_tasks().is_empty()));
    assert!(t0.elapsed() < Duration::from_secs(3), "{:?}", t0.elapsed());
    std::thread::sleep(Duration::from_millis(200));
    let task = rig.store.get_task(id(10)).unwrap();
    assert_eq!(task.status, TaskStatus::Canceled);
    assert_eq!(task.error_log, None);
    assert_eq!(AgentCounters::get(&agent.counters().stops), 1);
    assert!(!agent.data_dir().join("tasks").join(id(10).to_string()).exists());
}

#[test]
fn crash_before_submit_delivers_each_result_once() {
    let rig = Rig::new();
    let body = "import spada, time\n\
                n = int(spada.get_state() or b'0')\n\
                spada.publish({'run': n})\n\
                spada.put_state(str(n + 1).encode())\n\
                time.sleep(60)\n";
    rig.commit(&[(1, body)], &[(10, 1)]);
    let link = FaultLink::new(&rig.node, "tok-car");
    link.block_submit.store(true, Ordering::SeqCst);
    let agent = rig.start(rig.config(), link.clone());
    let state_file = agent.data_dir().join("tasks").join(id(10).to_string()).join(crate::sandbox::STATE_FILE);
    assert!(wait_until(SECS, || state_file.exists()));
    assert!(agent.wait_for(SECS, |s| s.local_tasks.get(&id(10)).is_some_and(|e| e.pending_results.len() == 1)));
    agent.crash();
    assert!(rig.results(10).is_empty());

    let agent = rig.start(rig.config(), rig.link());
    assert!(wait_until(SECS, || rig.results(10).len() == 2));
    std::thread::sleep(Duration::from_millis(300));
    assert_eq!(rig.results(10), vec![(0, json!({"run": 0})), (1, json!({"run": 1}))]);
    drop(agent);
}

#[test]
fn unauthenticated_agent_stops_with_an_error() {
    let rig = Rig::new();
    let mut cfg = rig.config();
    cfg.token = "wrong".into();
    let agent = rig.start(cfg, Arc::new(InProcessLink { node: rig.node.clone(), token: "wrong".into() }));
    match agent.wait() {
        Err(AgentError::Fatal(e)) => assert_eq!(e.code, ErrorCode::Unauthenticated),
        other => panic!("{other:?}"),
    }
}

#[test]
fn start_failure_is_reported_as_error() {
    let rig = Rig::new();
    rig.commit(&[(1, "pass\n")], &[(10, 1)]);
    let mut cfg = rig.config();
    cfg.sandbox.python_cmd = vec!["/nonexistent/python".into()];
    let agent = rig.start(cfg, rig.link());
    assert!(rig.wait_status(10, TaskStatus::Error, SECS));
    let log = rig.store.get_task(id(10)).unwrap().error_log.unwrap();
    assert!(log.contains("/nonexistent/python"), "{log}");
    assert_eq!(AgentCounters::get(&agent.counters().start_failures), 1);
}

#[test]
fn fetch_retries_through_an_outage() {
    let rig = Rig::new();
    rig.commit(&[(1, "pass\n")], &[(10, 1)]);
    let link = FaultLink::new(&rig.node, "tok-car");
    link.failing_fetches.store(3, Ordering::SeqCst);
    let agent = rig.start(rig.config(), link.clone());
    assert!(rig.wait_status(10, TaskStatus::Finished, SECS));
    assert!(link.fetch_calls.load(Ordering::SeqCst) >= 4);
    drop(agent);
}

#[test]
fn leftover_workdirs_are_removed() {
    let rig = Rig::new();
    let cfg = rig.config();
    let stale = cfg.data_dir.join("tasks").join(id(77).to_string());
    std::fs::create_dir_all(&stale).unwrap();
    std::fs::write(stale.join("state.bin"), b"old").unwrap();
    let agent = rig.start(cfg, rig.link());
    assert!(wait_until(SECS, || !stale.exists()));
    drop(agent);
}

#[test]
fn heartbeat_recovers_a_lost_notification() {
    let rig = Rig::new();
    let mut cfg = rig.config();
    cfg.heartbeat_s = Some(1);
    let agent = rig.start(cfg, rig.link());
    assert!(agent.wait_for(SECS, |s| !s.syncing_state && !s.syncing_locals));
    rig.bus.set_loss(1.0, 7);
    rig.commit(&[(1, "pass\n")], &[(10, 1)]);
    assert!(rig.wait_status(10, TaskStatus::Finished, SECS));
    drop(agent);
}

#[test]
fn signal_deliveries_are_traced() {
    let rig = Rig::new();
    let agent = rig.start(rig.config(), rig.link());
    agent.signals().observe("speed", json!(42));
    rig.commit(&[(1, "import spada\nspada.publish(spada.get_signal('speed'))\n")], &[(10, 1)]);
    assert!(rig.wait_status(10, TaskStatus::Finished, SECS));
    assert_eq!(rig.results(10), vec![(0, json!(42))]);
    let trace = agent.signal_trace(id(10)).unwrap();
    assert_eq!(trace.len(), 1);
    assert_eq!(trace[0].observation.value, json!(42));
}
