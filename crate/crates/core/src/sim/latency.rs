//! End-to-end latency of a real deployment: server, bus, agent and Python
//! payloads, measured from the user's side.
//!
//! Each iteration commits two fresh tasks one after the other. Task A
//! publishes two empty results and exits; it yields `t_start` (commit to
//! first result), `t_delay` (first to second result) and `t_exit` (second
//! result to FINISHED). Task B only imports the task library and yields
//! `t_cycle` (commit to FINISHED). The result subscription is opened before
//! each commit.

use crate::agent::config::{AgentConfig, SandboxConfig};
use crate::agent::runtime::{Agent, AgentDeps, InProcessLink, RpcLink};
use crate::bus::{BusServer, ClockFeed, MemoryBus, RemoteBus, UserEvent};
use crate::clock::SystemClock;
use crate::error::ApiError;
use crate::model::{ClientId, DocumentId, TaskStatus};
use crate::rpc::{RpcClient, RpcServer};
use crate::sdk::{LocalApi, RemoteApi, UserApi, UserClient, UserConfig};
use crate::server::{Authenticator, ServerNode};
use crate::signal::SignalCache;
use crate::store::MemoryStore;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::mpsc::RecvTimeoutError;
use std::sync::Arc;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Deployment {
    /// Server, bus and agent talk over 127.0.0.1 sockets.
    Loopback,
    /// The same components wired in-process, without sockets.
    InProcess,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySample {
    pub t_start: f64,
    pub t_delay: f64,
    pub t_exit: f64,
    pub t_cycle: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub p5: f64,
    pub p95: f64,
}

/// Mean, sample standard deviation and linearly interpolated 5th/95th
/// percentiles. The flag is false when fewer than two samples leave the
/// deviation undefined; it is then reported as 0.
pub fn summarize(xs: &[f64]) -> (Summary, bool) {
    if xs.is_empty() {
        return (Summary { mean: 0.0, sd: 0.0, p5: 0.0, p95: 0.0 }, false);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd_defined = xs.len() > 1;
    let sd = if sd_defined { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    (Summary { mean, sd, p5: percentile(&sorted, 0.05), p95: percentile(&sorted, 0.95) }, sd_defined)
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// The published measurements, in seconds, for side-by-side printing.
pub const PAPER_REFERENCE: [(&str, Summary); 4] = [
    ("t_start", Summary { mean: 4.282, sd: 0.260, p5: 3.973, p95: 4.605 }),
    ("t_delay", Summary { mean: 0.261, sd: 0.080, p5: 0.233, p95: 0.271 }),
    ("t_exit", Summary { mean: 1.198, sd: 0.316, p5: 0.830, p95: 1.695 }),
    ("t_cycle", Summary { mean: 5.640, sd: 0.377, p5: 4.940, p95: 6.191 }),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n: usize,
    pub deployment: Deployment,
    pub t_start: Summary,
    pub t_delay: Summary,
    pub t_exit: Summary,
    pub t_cycle: Summary,
    /// False for a single sample.
    pub sd_defined: bool,
    pub samples: Vec<LatencySample>,
}

impl BenchReport {
    pub fn from_samples(deployment: Deployment, samples: Vec<LatencySample>) -> Self {
        let col = |f: fn(&LatencySample) -> f64| summarize(&samples.iter().map(f).collect::<Vec<_>>());
        let (t_start, sd_defined) = col(|s| s.t_start);
        Self {
            n: samples.len(),
            deployment,
            t_start,
            t_delay: col(|s| s.t_delay).0,
            t_exit: col(|s| s.t_exit).0,
            t_cycle: col(|s| s.t_cycle).0,
            sd_defined,
            samples,
        }
    }

    pub fn columns(&self) -> [(&'static str, Summary); 4] {
        [("t_start", self.t_start), ("t_delay", self.t_delay), ("t_exit", self.t_exit), ("t_cycle", self.t_cycle)]
    }

    /// Measured statistics next to the published ones, in seconds.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let sd_note = if self.sd_defined { "" } else { " (SD undefined for n=1, shown as 0)" };
        let _ = writeln!(out, "latency over {} iterations, {:?}{sd_note}", self.n, self.deployment);
        let _ = writeln!(out, "{:<8} {:>9} {:>9} {:>9} {:>9}   {:>7} {:>7} {:>7} {:>7}", "", "mean", "SD", "P5", "P95", "ref", "SD", "P5", "P95");
        for ((name, m), (_, r)) in self.columns().iter().zip(PAPER_REFERENCE.iter()) {
            let _ = writeln!(
                out,
                "{name:<8} {:>9.4} {:>9.4} {:>9.4} {:>9.4}   {:>7.3} {:>7.3} {:>7.3} {:>7.3}",
                m.mean, m.sd, m.p5, m.p95, r.mean, r.sd, r.p5, r.p95
            );
        }
        out
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("bench setup failed: {0}")]
    Setup(String),
    #[error("task {task} ended {status}: {log}")]
    TaskFailed { task: DocumentId, status: TaskStatus, log: String },
    #[error("timed out waiting for {0}")]
    Timeout(String),
    #[error(transparent)]
    Api(#[from] ApiError),
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub python_cmd: Vec<String>,
    /// Agent data directory; a temporary one when unset.
    pub data_dir: Option<PathBuf>,
    /// Per-event wait limit.
    pub timeout: Duration,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { python_cmd: SandboxConfig::default().python_cmd, data_dir: None, timeout: Duration::from_secs(30) }
    }
}

const TASK_A: &str = "import spada\nspada.publish({})\nspada.publish({})\n";
const TASK_B: &str = "import spada\n";
const CLIENT_TOKEN: &str = "bench-client";
const USER_TOKEN: &str = "bench-user";

struct Deploy {
    user: UserClient,
    api: Arc<dyn UserApi>,
    agent: Agent,
    _servers: Option<(RpcServer, BusServer)>,
    _tmp: Option<tempfile::TempDir>,
}

fn deploy(deployment: Deployment, opts: &BenchOptions) -> Result<Deploy, BenchError> {
    let setup = |e: &dyn std::fmt::Display| BenchError::Setup(e.to_string());
    let client = ClientId::new("bench-client").expect("valid id");
    let bus = Arc::new(MemoryBus::new());
    let store = Arc::new(MemoryStore::new(Arc::new(SystemClock)));
    let auth = Authenticator::new().with_client(client.clone(), CLIENT_TOKEN).with_user(USER_TOKEN);
    let node = ServerNode::new(store, bus.clone(), auth)?;
    let (tmp, data_dir) = match &opts.data_dir {
        Some(d) => (None, d.clone()),
        None => {
            let t = tempfile::tempdir().map_err(|e| setup(&e))?;
            let d = t.path().join("agent");
            (Some(t), d)
        }
    };
    let mut cfg = AgentConfig {
        client_id: client,
        server_addr: String::new(),
        bus_addr: String::new(),
        token: CLIENT_TOKEN.into(),
        data_dir,
        sandbox: SandboxConfig { python_cmd: opts.python_cmd.clone(), ..Default::default() },
        online_window_s: 30,
        heartbeat_s: None,
        signals: Vec::new(),
        retry: Default::default(),
    };
    let (api, deps, servers): (Arc<dyn UserApi>, AgentDeps, _) = match deployment {
        Deployment::Loopback => {
            let rpc = RpcServer::bind("127.0.0.1:0", Arc::new(node)).map_err(|e| setup(&e))?;
            let bus_server = BusServer::bind("127.0.0.1:0", bus).map_err(|e| setup(&e))?;
            cfg.server_addr = rpc.local_addr().to_string();
            cfg.bus_addr = bus_server.local_addr().to_string();
            let user_cfg =
                UserConfig { server_addr: cfg.server_addr.clone(), bus_addr: cfg.bus_addr.clone(), token: USER_TOKEN.into() };
            let deps = AgentDeps {
                link: Arc::new(RpcLink(RpcClient::new(&cfg.server_addr, CLIENT_TOKEN))),
                feed: Arc::new(RemoteBus::new(&cfg.bus_addr)) as Arc<dyn ClockFeed>,
                signals: Arc::new(SignalCache::new()),
                clock: Arc::new(SystemClock),
            };
            (Arc::new(RemoteApi::new(&user_cfg)), deps, Some((rpc, bus_server)))
        }
        Deployment::InProcess => {
            let deps = AgentDeps {
                link: Arc::new(InProcessLink { node: node.clone(), token: CLIENT_TOKEN.into() }),
                feed: bus.clone(),
                signals: Arc::new(SignalCache::new()),
                clock: Arc::new(SystemClock),
            };
            (Arc::new(LocalApi { node, token: USER_TOKEN.into(), events: bus }), deps, None)
        }
    };
    let agent = Agent::start(cfg, deps).map_err(|e| setup(&e))?;
    Ok(Deploy { user: UserClient::new(api.clone()), api, agent, _servers: servers, _tmp: tmp })
}

/// Commits one single-task assignment and reports when each event
/// arrived, relative to the commit.
fn timed_task(d: &Deploy, body: String, opts: &BenchOptions) -> Result<Vec<(UserEvent, f64)>, BenchError> {
    let client = d.agent.client_id().clone();
    let payload = d.user.payload(body, "latency")?;
    let task = d.user.task(&client, payload, None)?;
    let assignment = d.user.assignment("latency", &[task])?;
    let sub = d.api.subscribe(assignment.id)?;
    let t0 = Instant::now();
    assignment.commit()?;
    let mut seen = Vec::new();
    loop {
        match sub.recv_timeout(opts.timeout) {
            Ok(ev) => {
                let at = t0.elapsed().as_secs_f64();
                let done = match &ev {
                    UserEvent::Status { status: TaskStatus::Finished, .. } => true,
                    UserEvent::Status { status, .. } => {
                        let log = d.user.tasks_of(assignment.id)?.into_iter().find_map(|t| t.error_log).unwrap_or_default();
                        return Err(BenchError::TaskFailed { task, status: *status, log });
                    }
                    UserEvent::Result { .. } => false,
                };
                seen.push((ev, at));
                if done {
                    return Ok(seen);
                }
            }
            Err(RecvTimeoutError::Timeout) => return Err(BenchError::Timeout(format!("task {task} after {seen:?}"))),
            Err(RecvTimeoutError::Disconnected) => return Err(BenchError::Setup("event stream closed".into())),
        }
    }
}

pub fn run_latency_bench(n: usize, deployment: Deployment, opts: &BenchOptions) -> Result<BenchReport, BenchError> {
    let d = deploy(deployment, opts)?;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        // Fresh payload documents every iteration.
        let a = timed_task(&d, format!("{TASK_A}# iteration {i}\n"), opts)?;
        let times: Vec<f64> = a.iter().map(|(_, t)| *t).collect();
        let [first, second, finished] = times[..] else {
            return Err(BenchError::Setup(format!("task A produced {} events, expected 3", times.len())));
        };
        let b = timed_task(&d, format!("{TASK_B}# iteration {i}\n"), opts)?;
        let t_cycle = b.last().map(|(_, t)| *t).unwrap_or_default();
        samples.push(LatencySample { t_start: first, t_delay: second - first, t_exit: finished - second, t_cycle });
    }
    let _ = d.agent.shutdown();
    Ok(BenchReport::from_samples(deployment, samples))
}
