//! Discrete-event convergence runs: real server and store, the agent's sync
//! state machine and durable outbox, simulated sandboxes and a simulated
//! network, all on one virtual clock.

use super::schedule::{client_name, FaultSchedule, Workload};
use crate::agent::cache::{DurableCache, OutboxWriter};
use crate::agent::config::{Backoff, RetryConfig};
use crate::agent::sync_loop::{plan_reconcile, AgentEvent, AgentState, Effect, LocalSync, StartPlan, TaskOutput};
use crate::bus::{BusError, Publisher, UserEvent};
use crate::clock::ManualClock;
use crate::error::ErrorCode;
use crate::model::{
    canonical_json, ClientId, ClientStateSnapshot, CommitBatch, DocumentId, NewAssignment, NewPayload, NewTask,
    SubmitBatch, TaskStatus, TreeValue,
};
use crate::server::{Authenticator, ServerNode};
use crate::store::{MemoryStore, QueryFilter, QueryResult};
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

/// Virtual time allowed after the last fault or user action.
pub const QUIESCENCE_BOUND_MS: u64 = 30_000;
pub const DEFAULT_HEARTBEAT_MS: u64 = 10_000;
const EPOCH_MS: u64 = 1_700_000_000_000;
const USER_TOKEN: &str = "sim-user";

fn client_token(i: usize) -> String {
    format!("sim-client-{i}")
}

fn expected_value(task: usize, seq: u64) -> TreeValue {
    json!({"task": task, "seq": seq})
}

#[derive(Default)]
struct SimBus {
    clocks: Mutex<Vec<(ClientId, u64)>>,
    retained: Mutex<BTreeMap<ClientId, u64>>,
}

impl Publisher for SimBus {
    fn publish_clock(&self, client: &ClientId, ts: u64) -> Result<(), BusError> {
        self.clocks.lock().push((client.clone(), ts));
        self.retained.lock().insert(client.clone(), ts);
        Ok(())
    }

    fn publish_user_event(&self, _: &DocumentId, _: UserEvent) -> Result<(), BusError> {
        Ok(())
    }
}

/// Outbox bytes that outlive the agent process.
#[derive(Clone, Default)]
struct Disk(Arc<Mutex<Vec<u8>>>);

impl OutboxWriter for Disk {
    fn append(&mut self, bytes: &[u8]) -> std::io::Result<()> {
        self.0.lock().extend_from_slice(bytes);
        Ok(())
    }

    fn reset(&mut self, contents: &[u8]) -> std::io::Result<()> {
        *self.0.lock() = contents.to_vec();
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Call {
    Fetch,
    Submit(SubmitBatch),
    Heartbeat,
    GetPayload(DocumentId),
}

impl Call {
    fn name(&self) -> &'static str {
        match self {
            Call::Fetch => "fetch_state",
            Call::Submit(_) => "submit",
            Call::Heartbeat => "heartbeat",
            Call::GetPayload(_) => "get_payload",
        }
    }
}

#[derive(Debug, Clone)]
enum Reply {
    State(ClientStateSnapshot),
    Payload(DocumentId),
}

#[derive(Debug)]
enum Ev {
    Commit(usize),
    Cancel(usize),
    Crash(usize),
    Boot(usize),
    Notify { client: usize, inc: u64, ts: u64 },
    Loop { client: usize, inc: u64, ev: AgentEvent },
    Arrive { client: usize, inc: u64, call_id: u64, call: Call },
    Reply { client: usize, inc: u64, call_id: u64, reply: Option<Reply> },
    Retry { client: usize, inc: u64, call_id: u64 },
    Step { client: usize, inc: u64, task: DocumentId, gen: u64 },
    Heartbeat { client: usize, inc: u64 },
}

struct InFlight {
    call: Call,
    backoff: Backoff,
}

struct Reconcile {
    starts: VecDeque<StartPlan>,
    sync: LocalSync,
}

struct SimSandbox {
    next_seq: u64,
    gen: u64,
}

struct SimAgent {
    inc: u64,
    state: AgentState,
    cache: DurableCache,
    running: BTreeMap<DocumentId, SimSandbox>,
    calls: BTreeMap<u64, InFlight>,
    reconcile: Option<Reconcile>,
}

struct ClientSlot {
    id: ClientId,
    token: String,
    disk: Disk,
    /// Payload documents on the client's disk.
    docs: BTreeSet<DocumentId>,
    agent: Option<SimAgent>,
    incarnations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPlan {
    pub id: DocumentId,
    pub index: usize,
    pub client: usize,
    pub assignment: usize,
    pub results: u32,
    pub outcome: TaskStatus,
    pub cancel_at_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentPlan {
    pub id: DocumentId,
    pub payload_id: DocumentId,
    pub commit_at_ms: u64,
    pub tasks: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimStats {
    pub events: u64,
    pub rpc_attempts: u64,
    pub rpc_failures: u64,
    pub notifications_sent: u64,
    pub notifications_dropped: u64,
    pub restarts: u64,
    pub sandbox_starts: u64,
    pub results_stored: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "UPPERCASE")]
pub enum Verdict {
    Pass,
    Fail { reasons: Vec<String> },
}

impl Verdict {
    pub fn is_pass(&self) -> bool {
        matches!(self, Verdict::Pass)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimReport {
    pub verdict: Verdict,
    /// When every check first held, if it did within the bound.
    pub quiesced_at_ms: Option<u64>,
    pub deadline_ms: u64,
    pub stats: SimStats,
    /// Canonical JSON lines with virtual timestamps.
    pub trace: Vec<String>,
}

impl SimReport {
    pub fn trace_ndjson(&self) -> String {
        self.trace.iter().map(|l| format!("{l}\n")).collect()
    }
}

pub struct Simulation {
    schedule: FaultSchedule,
    workload: Workload,
    heartbeat_ms: Option<u64>,
    retry: RetryConfig,
}

impl Simulation {
    pub fn new(schedule: FaultSchedule, workload: Workload) -> Self {
        Self { schedule, workload, heartbeat_ms: Some(DEFAULT_HEARTBEAT_MS), retry: RetryConfig::default() }
    }

    /// `None` disables the agents' periodic liveness fetch.
    pub fn heartbeat(mut self, every_ms: Option<u64>) -> Self {
        self.heartbeat_ms = every_ms;
        self
    }

    pub fn run(self) -> SimReport {
        World::new(self).run()
    }
}

pub fn run_convergence(schedule: FaultSchedule, workload: Workload) -> SimReport {
    Simulation::new(schedule, workload).run()
}

struct World {
    schedule: FaultSchedule,
    heartbeat_ms: Option<u64>,
    retry: RetryConfig,
    rng: ChaCha8Rng,
    now: u64,
    seq: u64,
    queue: BTreeMap<(u64, u64), Ev>,
    clock: Arc<ManualClock>,
    bus: Arc<SimBus>,
    node: ServerNode,
    clients: Vec<ClientSlot>,
    tasks: Vec<TaskPlan>,
    task_index: BTreeMap<DocumentId, usize>,
    assignments: Vec<AssignmentPlan>,
    canceled: BTreeSet<usize>,
    next_call: u64,
    next_gen: u64,
    stats: SimStats,
    trace: Vec<String>,
    errors: Vec<String>,
}

impl World {
    fn new(sim: Simulation) -> Self {
        let clock = Arc::new(ManualClock::new(EPOCH_MS));
        let bus = Arc::new(SimBus::default());
        let store = Arc::new(MemoryStore::new(clock.clone()));
        let mut auth = Authenticator::new().with_user(USER_TOKEN);
        let clients: Vec<ClientSlot> = (0..sim.workload.clients.max(1))
            .map(|i| ClientSlot {
                id: client_name(i),
                token: client_token(i),
                disk: Disk::default(),
                docs: BTreeSet::new(),
                agent: None,
                incarnations: 0,
            })
            .collect();
        for c in &clients {
            auth = auth.with_client(c.id.clone(), &c.token);
        }
        let node = ServerNode::new(store, bus.clone(), auth).expect("in-memory store");
        let (tasks, assignments) = plan_workload(sim.schedule.seed, &sim.workload, clients.len());
        let task_index = tasks.iter().map(|t| (t.id, t.index)).collect();
        Self {
            rng: ChaCha8Rng::seed_from_u64(sim.schedule.seed),
            schedule: sim.schedule,
            heartbeat_ms: sim.heartbeat_ms,
            retry: sim.retry,
            now: 0,
            seq: 0,
            queue: BTreeMap::new(),
            clock,
            bus,
            node,
            clients,
            tasks,
            task_index,
            assignments,
            canceled: BTreeSet::new(),
            next_call: 0,
            next_gen: 0,
            stats: SimStats::default(),
            trace: Vec::new(),
            errors: Vec::new(),
        }
    }

    fn push(&mut self, at: u64, ev: Ev) {
        self.seq += 1;
        self.queue.insert((at, self.seq), ev);
    }

    fn delay(&mut self) -> u64 {
        let (lo, hi) = self.schedule.message_delay;
        self.rng.gen_range(lo..=hi.max(lo))
    }

    fn log(&mut self, client: Option<usize>, kind: &str, detail: serde_json::Value) {
        let client = client.map(|c| self.clients[c].id.to_string());
        self.trace.push(canonical_json(&json!({"t": self.now, "client": client, "ev": kind, "detail": detail})));
    }

    fn alive(&self, client: usize, inc: u64) -> bool {
        self.clients[client].agent.as_ref().is_some_and(|a| a.inc == inc)
    }

    fn horizon(&self) -> u64 {
        let ops = self.assignments.iter().map(|a| a.commit_at_ms);
        let cancels = self.tasks.iter().filter_map(|t| t.cancel_at_ms);
        ops.chain(cancels).chain([self.schedule.last_fault_ms()]).max().unwrap_or(0)
    }

    fn run(mut self) -> SimReport {
        for a in 0..self.assignments.len() {
            let at = self.assignments[a].commit_at_ms;
            self.push(at, Ev::Commit(a));
        }
        for t in 0..self.tasks.len() {
            if let Some(at) = self.tasks[t].cancel_at_ms {
                self.push(at, Ev::Cancel(t));
            }
        }
        for c in 0..self.clients.len() {
            self.push(0, Ev::Boot(c));
        }
        for r in self.schedule.agent_restarts.clone() {
            if let Some(c) = self.clients.iter().position(|s| s.id == r.client_id) {
                self.push(r.at_ms, Ev::Crash(c));
                self.push(r.at_ms + r.down_ms, Ev::Boot(c));
            }
        }
        let horizon = self.horizon();
        let deadline = horizon + QUIESCENCE_BOUND_MS;
        let mut quiesced_at = None;
        while let Some(entry) = self.queue.first_entry() {
            let (at, _) = *entry.key();
            if at > deadline {
                break;
            }
            let ev = entry.remove();
            self.now = at;
            self.clock.set(EPOCH_MS + at);
            self.stats.events += 1;
            self.handle(ev);
            if at >= horizon && self.problems().is_empty() {
                quiesced_at = Some(at);
                break;
            }
        }
        self.now = self.now.max(quiesced_at.unwrap_or(deadline));
        self.stats.results_stored = self.node.store().dump().results.values().map(|r| r.len() as u64).sum();
        let mut reasons = std::mem::take(&mut self.errors);
        reasons.extend(self.problems());
        if quiesced_at.is_none() && reasons.is_empty() {
            reasons.push(format!("not quiescent by {deadline} ms"));
        }
        let verdict = if reasons.is_empty() { Verdict::Pass } else { Verdict::Fail { reasons } };
        self.log(None, "verdict", serde_json::to_value(&verdict).unwrap());
        SimReport { verdict, quiesced_at_ms: quiesced_at, deadline_ms: deadline, stats: self.stats, trace: self.trace }
    }

    fn flush_bus(&mut self) {
        let published = std::mem::take(&mut *self.bus.clocks.lock());
        for (client_id, ts) in published {
            let Some(c) = self.clients.iter().position(|s| s.id == client_id) else { continue };
            self.notify(c, ts);
        }
    }

    fn notify(&mut self, c: usize, ts: u64) {
        let Some(inc) = self.clients[c].agent.as_ref().map(|a| a.inc) else { return };
        self.stats.notifications_sent += 1;
        if self.rng.gen_bool(self.schedule.notification_drop_p.clamp(0.0, 1.0)) {
            self.stats.notifications_dropped += 1;
            self.log(Some(c), "notify_dropped", json!({"ts": ts}));
            return;
        }
        let at = self.now + self.delay();
        self.push(at, Ev::Notify { client: c, inc, ts });
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::Commit(a) => self.commit(a),
            Ev::Cancel(t) => {
                let id = self.tasks[t].id;
                let outcome = self.node.cancel(USER_TOKEN, id);
                if outcome.is_ok() {
                    self.canceled.insert(t);
                }
                self.log(None, "cancel", json!({"task": t, "ok": outcome.is_ok()}));
                self.flush_bus();
            }
            Ev::Crash(c) => {
                if let Some(agent) = self.clients[c].agent.take() {
                    self.stats.restarts += 1;
                    self.log(Some(c), "crash", json!({"killed": agent.running.keys().collect::<Vec<_>>()}));
                }
            }
            Ev::Boot(c) => self.boot(c),
            Ev::Notify { client, inc, ts } => {
                if self.alive(client, inc) {
                    self.log(Some(client), "notify", json!({"ts": ts}));
                    self.deliver(client, AgentEvent::ClockFromBus { ts });
                }
            }
            Ev::Loop { client, inc, ev } => {
                if self.alive(client, inc) {
                    self.handle_agent_event(client, ev);
                }
            }
            Ev::Arrive { client, inc, call_id, call } => self.arrive(client, inc, call_id, call),
            Ev::Reply { client, inc, call_id, reply } => self.reply(client, inc, call_id, reply),
            Ev::Retry { client, inc, call_id } => {
                if self.alive(client, inc) {
                    self.attempt(client, call_id);
                }
            }
            Ev::Step { client, inc, task, gen } => self.step(client, inc, task, gen),
            Ev::Heartbeat { client, inc } => {
                if self.alive(client, inc) {
                    self.start_call(client, Call::Heartbeat);
                    if let Some(every) = self.heartbeat_ms {
                        self.push(self.now + every, Ev::Heartbeat { client, inc });
                    }
                }
            }
        }
    }

    fn commit(&mut self, a: usize) {
        let plan = self.assignments[a].clone();
        let batch = CommitBatch {
            payloads: vec![NewPayload { id: plan.payload_id, name: format!("payload-{a}"), body: "import spada\n".into() }],
            parameters: Vec::new(),
            tasks: plan
                .tasks
                .iter()
                .map(|&t| NewTask {
                    id: self.tasks[t].id,
                    assignment_id: plan.id,
                    client_id: self.clients[self.tasks[t].client].id.clone(),
                    payload_id: plan.payload_id,
                    parameters_id: None,
                })
                .collect(),
            assignments: vec![NewAssignment {
                id: plan.id,
                name: format!("assignment-{a}"),
                task_ids: plan.tasks.iter().map(|&t| self.tasks[t].id).collect(),
            }],
        };
        if let Err(e) = self.node.commit(USER_TOKEN, batch) {
            self.errors.push(format!("commit {a} failed: {e}"));
        }
        self.log(None, "commit", json!({"assignment": a, "tasks": plan.tasks}));
        self.flush_bus();
    }

    fn boot(&mut self, c: usize) {
        let slot = &mut self.clients[c];
        if slot.agent.is_some() {
            return;
        }
        slot.incarnations += 1;
        let inc = slot.incarnations;
        let existing = String::from_utf8_lossy(&slot.disk.0.lock()).into_owned();
        let (cache, pending) = DurableCache::with_writer(Box::new(slot.disk.clone()), &existing);
        let replayed: Vec<_> = pending.keys().copied().collect();
        let (state, effects) = AgentState::recovered(pending);
        slot.agent =
            Some(SimAgent { inc, state, cache, running: BTreeMap::new(), calls: BTreeMap::new(), reconcile: None });
        self.log(Some(c), "boot", json!({"incarnation": inc, "replayed": replayed}));
        self.execute(c, effects);
        let retained = self.bus.retained.lock().get(&self.clients[c].id).copied();
        if let Some(ts) = retained {
            self.notify(c, ts);
        }
        if let Some(every) = self.heartbeat_ms {
            self.push(self.now + every, Ev::Heartbeat { client: c, inc });
        }
    }

    fn deliver(&mut self, c: usize, ev: AgentEvent) {
        let inc = self.clients[c].agent.as_ref().expect("alive").inc;
        self.push(self.now, Ev::Loop { client: c, inc, ev });
    }

    fn handle_agent_event(&mut self, c: usize, ev: AgentEvent) {
        let agent = self.clients[c].agent.as_mut().expect("alive");
        let effects = agent.state.handle_event(ev);
        self.execute(c, effects);
    }

    fn execute(&mut self, c: usize, effects: Vec<Effect>) {
        for effect in effects {
            match effect {
                Effect::FetchState => self.start_call(c, Call::Fetch),
                Effect::Submit(plan) => {
                    let batch =
                        SubmitBatch { client_id: self.clients[c].id.clone(), results: plan.results, statuses: plan.statuses };
                    self.start_call(c, Call::Submit(batch));
                }
                Effect::SyncContainers { snapshot, locals } => {
                    let plan = plan_reconcile(&snapshot, &locals);
                    let agent = self.clients[c].agent.as_mut().expect("alive");
                    let doomed: Vec<DocumentId> = agent
                        .running
                        .keys()
                        .filter(|id| snapshot.task(id).is_none())
                        .chain(plan.stop.iter())
                        .copied()
                        .collect();
                    for id in &doomed {
                        agent.running.remove(id);
                    }
                    agent.reconcile = Some(Reconcile {
                        starts: plan.start.into_iter().collect(),
                        sync: LocalSync { started: Vec::new(), stopped: plan.stop },
                    });
                    if !doomed.is_empty() {
                        self.log(Some(c), "stop", json!({"tasks": doomed}));
                    }
                    self.continue_reconcile(c);
                }
                Effect::Confirmed { task_id, count } => {
                    self.clients[c].agent.as_ref().expect("alive").cache.confirm(task_id, count)
                }
                Effect::Forget { task_id } => self.clients[c].agent.as_ref().expect("alive").cache.forget(task_id),
            }
        }
    }

    fn continue_reconcile(&mut self, c: usize) {
        loop {
            let slot = &mut self.clients[c];
            let agent = slot.agent.as_mut().expect("alive");
            let rec = agent.reconcile.as_mut().expect("reconciling");
            let Some(start) = rec.starts.front().cloned() else {
                let sync = agent.reconcile.take().unwrap().sync;
                self.deliver(c, AgentEvent::LocalTasksSynced(sync));
                return;
            };
            let id = start.task.task_id;
            if agent.running.contains_key(&id) {
                rec.starts.pop_front();
                continue;
            }
            if !slot.docs.contains(&start.task.payload_id) {
                self.start_call(c, Call::GetPayload(start.task.payload_id));
                return;
            }
            rec.starts.pop_front();
            rec.sync.started.push(id);
            self.next_gen += 1;
            let gen = self.next_gen;
            agent.running.insert(id, SimSandbox { next_seq: start.base_seq, gen });
            let inc = agent.inc;
            self.stats.sandbox_starts += 1;
            self.log(Some(c), "start", json!({"task": id, "base_seq": start.base_seq}));
            let at = self.now + self.rng.gen_range(20..300);
            self.push(at, Ev::Step { client: c, inc, task: id, gen });
        }
    }

    fn start_call(&mut self, c: usize, call: Call) {
        self.next_call += 1;
        let id = self.next_call;
        let backoff = Backoff::new(self.retry);
        self.clients[c].agent.as_mut().expect("alive").calls.insert(id, InFlight { call, backoff });
        self.attempt(c, id);
    }

    fn attempt(&mut self, c: usize, call_id: u64) {
        let agent = self.clients[c].agent.as_ref().expect("alive");
        let Some(inflight) = agent.calls.get(&call_id) else { return };
        let (inc, call) = (agent.inc, inflight.call.clone());
        self.stats.rpc_attempts += 1;
        let at = self.now + self.delay();
        if self.schedule.link_down(&self.clients[c].id, self.now) {
            self.push(at, Ev::Reply { client: c, inc, call_id, reply: None });
        } else {
            self.push(at, Ev::Arrive { client: c, inc, call_id, call });
        }
    }

    /// The server handles requests even from an agent that has since died.
    fn arrive(&mut self, c: usize, inc: u64, call_id: u64, call: Call) {
        let at = self.now + self.delay();
        if self.schedule.link_down(&self.clients[c].id, self.now) {
            self.push(at, Ev::Reply { client: c, inc, call_id, reply: None });
            return;
        }
        let (client_id, token) = (self.clients[c].id.clone(), self.clients[c].token.clone());
        let outcome = match &call {
            Call::Fetch | Call::Heartbeat => self.node.fetch_state(&token, &client_id).map(Reply::State),
            Call::Submit(batch) => self.node.submit(&token, batch.clone()).map(Reply::State),
            Call::GetPayload(id) => self.node.get_payload(&token, *id).map(|_| Reply::Payload(*id)),
        };
        self.flush_bus();
        let reply = match outcome {
            Ok(r) => Some(r),
            Err(e) if e.code == ErrorCode::Unavailable => None,
            Err(e) => {
                self.errors.push(format!("{} from {client_id} refused: {e}", call.name()));
                None
            }
        };
        self.push(at, Ev::Reply { client: c, inc, call_id, reply });
    }

    fn reply(&mut self, c: usize, inc: u64, call_id: u64, reply: Option<Reply>) {
        if !self.alive(c, inc) {
            return;
        }
        let reply = if self.schedule.link_down(&self.clients[c].id, self.now) { None } else { reply };
        let agent = self.clients[c].agent.as_mut().expect("alive");
        let Some(mut inflight) = agent.calls.remove(&call_id) else { return };
        let name = inflight.call.name();
        let Some(reply) = reply else {
            self.stats.rpc_failures += 1;
            if matches!(inflight.call, Call::Heartbeat) {
                return;
            }
            let wait = inflight.backoff.next_delay(&mut self.rng).as_millis() as u64;
            agent.calls.insert(call_id, inflight);
            self.log(Some(c), "rpc_failed", json!({"call": name, "retry_in": wait}));
            self.push(self.now + wait, Ev::Retry { client: c, inc, call_id });
            return;
        };
        match (inflight.call, reply) {
            (Call::Heartbeat, Reply::State(s)) => {
                self.log(Some(c), "heartbeat", json!({"ts": s.ts}));
                self.deliver(c, AgentEvent::ClockFromBus { ts: s.ts });
            }
            (_, Reply::State(s)) => {
                self.log(Some(c), name, json!({"ts": s.ts, "active": s.tasks.len()}));
                self.deliver(c, AgentEvent::NewState(s));
            }
            (_, Reply::Payload(id)) => {
                self.clients[c].docs.insert(id);
                self.continue_reconcile(c);
            }
        }
    }

    fn step(&mut self, c: usize, inc: u64, task: DocumentId, gen: u64) {
        if !self.alive(c, inc) {
            return;
        }
        let index = self.task_index[&task];
        let (total, outcome) = (self.tasks[index].results as u64, self.tasks[index].outcome);
        let produced_at = self.clock_now();
        let agent = self.clients[c].agent.as_mut().expect("alive");
        let Some(sb) = agent.running.get_mut(&task).filter(|s| s.gen == gen) else { return };
        let output = if sb.next_seq < total {
            let seq = sb.next_seq;
            sb.next_seq += 1;
            let value = expected_value(index, seq);
            if let Err(e) = agent.cache.record_result(task, seq, value.clone(), produced_at) {
                self.errors.push(format!("outbox write failed: {e}"));
            }
            let at = self.now + self.rng.gen_range(100..1_500);
            self.push(at, Ev::Step { client: c, inc, task, gen });
            TaskOutput::Result { seq, value, produced_at }
        } else {
            agent.running.remove(&task);
            let log = (outcome == TaskStatus::Error).then(|| "Traceback: simulated failure".to_owned());
            if let Err(e) = agent.cache.record_status(task, outcome, log.clone()) {
                self.errors.push(format!("outbox write failed: {e}"));
            }
            TaskOutput::Status { status: outcome, error_log: log }
        };
        self.log(Some(c), "output", json!({"task": index, "output": output}));
        self.deliver(c, AgentEvent::TaskOutput { task_id: task, output });
    }

    fn clock_now(&self) -> u64 {
        EPOCH_MS + self.now
    }

    /// Everything that keeps the run from passing right now.
    fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let store = self.node.store();
        let mut active: BTreeMap<usize, BTreeSet<DocumentId>> = BTreeMap::new();
        for plan in &self.tasks {
            let doc = match store.get_task(plan.id) {
                Ok(d) => d,
                Err(_) => {
                    out.push(format!("task {} was never committed", plan.index));
                    continue;
                }
            };
            let results = match store.query(&QueryFilter::results_of_task(plan.id)) {
                Ok(QueryResult::Results(r)) => r,
                _ => Vec::new(),
            };
            for (i, r) in results.iter().enumerate() {
                if r.seq != i as u64 {
                    out.push(format!("task {} has seq {} at position {i}", plan.index, r.seq));
                    break;
                }
                if r.value != expected_value(plan.index, r.seq) {
                    out.push(format!("task {} seq {} holds {}", plan.index, r.seq, r.value));
                }
            }
            if results.len() as u64 != doc.result_count {
                out.push(format!("task {} result_count {} but {} stored", plan.index, doc.result_count, results.len()));
            }
            match doc.status {
                TaskStatus::Active => {
                    active.entry(plan.client).or_default().insert(plan.id);
                    out.push(format!("task {} still ACTIVE", plan.index));
                }
                TaskStatus::Canceled if self.canceled.contains(&plan.index) => {
                    if results.len() as u64 > plan.results as u64 {
                        out.push(format!("task {} stored {} results of {}", plan.index, results.len(), plan.results));
                    }
                }
                status => {
                    if status != plan.outcome {
                        out.push(format!("task {} ended {status}, expected {}", plan.index, plan.outcome));
                    }
                    if results.len() as u64 != plan.results as u64 {
                        out.push(format!("task {} stored {} results, produced {}", plan.index, results.len(), plan.results));
                    }
                }
            }
        }
        for (c, slot) in self.clients.iter().enumerate() {
            let Some(agent) = &slot.agent else {
                out.push(format!("{} is down", slot.id));
                continue;
            };
            let busy = agent.calls.values().any(|f| !matches!(f.call, Call::Heartbeat));
            if busy || agent.state.syncing_state || agent.state.syncing_locals || agent.reconcile.is_some() {
                out.push(format!("{} is still syncing", slot.id));
            }
            if agent.state.local_tasks.values().any(|e| e.has_pending()) || !agent.cache.pending().is_empty() {
                out.push(format!("{} has unsubmitted outputs", slot.id));
            }
            let running: BTreeSet<DocumentId> = agent.running.keys().copied().collect();
            if running != active.remove(&c).unwrap_or_default() {
                out.push(format!("{} runs {} sandboxes that do not match the server", slot.id, running.len()));
            }
        }
        out
    }
}

fn plan_workload(seed: u64, w: &Workload, clients: usize) -> (Vec<TaskPlan>, Vec<AssignmentPlan>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a5c_0000);
    let mut id = || DocumentId::generate(&mut rng).expect("seeded rng");
    let n_assign = if w.tasks == 0 { 0 } else { w.tasks.min(3) };
    let mut assignments: Vec<AssignmentPlan> =
        (0..n_assign).map(|_| AssignmentPlan { id: id(), payload_id: id(), commit_at_ms: 0, tasks: Vec::new() }).collect();
    let task_ids: Vec<DocumentId> = (0..w.tasks).map(|_| id()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a5c_0001);
    for (i, a) in assignments.iter_mut().enumerate() {
        a.commit_at_ms = if i == 0 { 0 } else { rng.gen_range(0..12_000) };
    }
    let tasks = task_ids
        .into_iter()
        .enumerate()
        .map(|(index, id)| {
            let assignment = index % n_assign.max(1);
            assignments[assignment].tasks.push(index);
            let outcome = if rng.gen_bool(w.error_p.clamp(0.0, 1.0)) { TaskStatus::Error } else { TaskStatus::Finished };
            let cancel_at_ms = rng
                .gen_bool(w.cancel_p.clamp(0.0, 1.0))
                .then(|| assignments[assignment].commit_at_ms + rng.gen_range(0..6_000));
            TaskPlan {
                id,
                index,
                client: rng.gen_range(0..clients),
                assignment,
                results: w.results_per_task,
                outcome,
                cancel_at_ms,
            }
        })
        .collect();
    (tasks, assignments)
}
