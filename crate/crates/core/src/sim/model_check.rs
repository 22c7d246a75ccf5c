//! Exhaustive interleaving enumeration of the sync loop on one client with
//! one task.
//!
//! The environment is abstract: a server holding one task, a notification
//! queue, the activities the loop spawned, and a sandbox that may publish
//! results, exit, or be canceled by the user. Every sequence of enabled
//! steps up to the depth bound is explored.

use crate::agent::sync_loop::{plan_reconcile, AgentEvent, AgentState, Effect, LocalSync, LocalView, SubmitPlan, TaskOutput};
use crate::model::{ClientStateSnapshot, DocumentId, TaskStatus, TaskSummary};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::{BTreeMap, VecDeque};

pub const MAX_DEPTH: usize = 10;
/// Results the sandbox may publish in one run.
const MAX_OUTPUTS: u64 = 2;
const DRAIN_LIMIT: usize = 64;

fn task_id() -> DocumentId {
    DocumentId::from_bytes([1; 16])
}

#[derive(Debug, Clone)]
enum Activity {
    Fetch,
    Submit(SubmitPlan),
    Sync(ClientStateSnapshot, BTreeMap<DocumentId, LocalView>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    /// The oldest undelivered clock notification reaches the loop.
    Deliver,
    /// The n-th in-flight activity finishes.
    Complete(usize),
    /// The sandbox publishes a result.
    Output,
    /// The sandbox exits cleanly.
    Exit,
    /// The user cancels the task.
    Cancel,
}

#[derive(Debug, Clone)]
struct Server {
    ts: u64,
    status: TaskStatus,
    result_count: u64,
}

impl Server {
    fn snapshot(&self) -> ClientStateSnapshot {
        let tasks = if self.status == TaskStatus::Active {
            vec![TaskSummary { task_id: task_id(), payload_id: task_id(), parameters_id: None, result_count: self.result_count }]
        } else {
            Vec::new()
        };
        ClientStateSnapshot { ts: self.ts, tasks }
    }
}

#[derive(Debug, Clone)]
struct World {
    agent: AgentState,
    server: Server,
    notes: VecDeque<u64>,
    inflight: Vec<Activity>,
    sandbox_running: bool,
    next_seq: u64,
    produced: u64,
    exited: bool,
    canceled: bool,
    rerun: bool,
    mutant: bool,
}

impl World {
    fn initial(mutant: bool) -> Self {
        let (agent, effects) = AgentState::recovered(BTreeMap::new());
        let mut w = World {
            agent,
            server: Server { ts: 1, status: TaskStatus::Active, result_count: 0 },
            notes: VecDeque::from([1]),
            inflight: Vec::new(),
            sandbox_running: false,
            next_seq: 0,
            produced: 0,
            exited: false,
            canceled: false,
            rerun: false,
            mutant,
        };
        w.spawn(effects);
        w
    }

    fn spawn(&mut self, effects: Vec<Effect>) {
        for e in effects {
            match e {
                Effect::FetchState => self.inflight.push(Activity::Fetch),
                Effect::Submit(plan) => self.inflight.push(Activity::Submit(plan)),
                Effect::SyncContainers { snapshot, locals } => self.inflight.push(Activity::Sync(snapshot, locals)),
                Effect::Confirmed { .. } | Effect::Forget { .. } => {}
            }
        }
    }

    fn feed(&mut self, ev: AgentEvent) {
        let effects = self.agent.handle_event(ev);
        if self.mutant {
            self.agent.dirty_state = false;
        }
        self.spawn(effects);
    }

    fn bump(&mut self) {
        self.server.ts += 1;
        self.notes.push_back(self.server.ts);
    }

    fn apply(&mut self, plan: &SubmitPlan) {
        for r in &plan.results {
            if self.server.status == TaskStatus::Active && r.seq == self.server.result_count {
                self.server.result_count += 1;
                self.bump();
            }
        }
        for s in &plan.statuses {
            if self.server.status == TaskStatus::Active {
                self.server.status = s.status;
                self.bump();
            }
        }
    }

    fn enabled(&self) -> Vec<Step> {
        let mut steps = Vec::new();
        if !self.notes.is_empty() {
            steps.push(Step::Deliver);
        }
        steps.extend((0..self.inflight.len()).map(Step::Complete));
        if self.sandbox_running && self.produced < MAX_OUTPUTS {
            steps.push(Step::Output);
        }
        if self.sandbox_running {
            steps.push(Step::Exit);
        }
        if self.server.status == TaskStatus::Active && !self.canceled {
            steps.push(Step::Cancel);
        }
        steps
    }

    fn step(&mut self, step: Step) {
        match step {
            Step::Deliver => {
                let ts = self.notes.pop_front().expect("enabled");
                self.feed(AgentEvent::ClockFromBus { ts });
            }
            Step::Complete(i) => match self.inflight.remove(i) {
                Activity::Fetch => {
                    let s = self.server.snapshot();
                    self.feed(AgentEvent::NewState(s));
                }
                Activity::Submit(plan) => {
                    self.apply(&plan);
                    let s = self.server.snapshot();
                    self.feed(AgentEvent::NewState(s));
                }
                Activity::Sync(snapshot, locals) => {
                    let plan = plan_reconcile(&snapshot, &locals);
                    let mut sync = LocalSync::default();
                    if self.sandbox_running && (snapshot.tasks.is_empty() || plan.stop.contains(&task_id())) {
                        self.sandbox_running = false;
                    }
                    sync.stopped = plan.stop;
                    for start in plan.start {
                        if self.exited {
                            self.rerun = true;
                        } else if !self.sandbox_running {
                            self.sandbox_running = true;
                            self.next_seq = start.base_seq;
                            sync.started.push(start.task.task_id);
                        }
                    }
                    self.feed(AgentEvent::LocalTasksSynced(sync));
                }
            },
            Step::Output => {
                let seq = self.next_seq;
                self.next_seq += 1;
                self.produced += 1;
                self.feed(AgentEvent::TaskOutput {
                    task_id: task_id(),
                    output: TaskOutput::Result { seq, value: json!(seq), produced_at: 0 },
                });
            }
            Step::Exit => {
                self.sandbox_running = false;
                self.exited = true;
                self.feed(AgentEvent::TaskOutput {
                    task_id: task_id(),
                    output: TaskOutput::Status { status: TaskStatus::Finished, error_log: None },
                });
            }
            Step::Cancel => {
                self.canceled = true;
                self.server.status = TaskStatus::Canceled;
                self.bump();
            }
        }
    }

    fn state_activities(&self) -> usize {
        self.inflight.iter().filter(|a| !matches!(a, Activity::Sync(..))).count()
    }

    /// Invariants that must hold in every reachable state.
    fn check(&self, prev_ts: u64) -> Result<(), &'static str> {
        let in_flight = self.state_activities();
        if in_flight > 1 {
            return Err("single-flight: more than one fetch/submit in flight");
        }
        if (in_flight == 1) != self.agent.syncing_state {
            return Err("single-flight: syncingState disagrees with the activities in flight");
        }
        if self.inflight.iter().filter(|a| matches!(a, Activity::Sync(..))).count() > 1 {
            return Err("more than one reconciliation in flight");
        }
        if self.agent.dirty_state && !self.agent.syncing_state {
            return Err("dirtyState without syncingState");
        }
        if self.rerun {
            return Err("a task that exited was started again");
        }
        if self.agent.ts < prev_ts {
            return Err("logical clock went backwards");
        }
        if in_flight == 0 && self.server.status == TaskStatus::Active {
            if let Some(e) = self.agent.local_tasks.get(&task_id()) {
                if e.has_pending() {
                    return Err("dirty-state completeness: outputs pending with no submit in flight");
                }
            }
        }
        Ok(())
    }

    /// Lets the environment settle without new outputs, then checks that
    /// everything published while the task was active reached the server.
    fn check_drained(&self) -> Result<(), &'static str> {
        let mut w = self.clone();
        for _ in 0..DRAIN_LIMIT {
            if !w.inflight.is_empty() {
                w.step(Step::Complete(0));
            } else if !w.notes.is_empty() {
                w.step(Step::Deliver);
            } else {
                break;
            }
        }
        if !w.inflight.is_empty() || !w.notes.is_empty() {
            return Err("no quiescence after draining");
        }
        if w.canceled {
            return Ok(());
        }
        if w.server.result_count != w.next_seq {
            return Err("dirty-state completeness: a published result never reached the server");
        }
        if w.exited && w.server.status != TaskStatus::Finished {
            return Err("dirty-state completeness: the exit status never reached the server");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counterexample {
    pub invariant: String,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelCheckReport {
    pub depth: usize,
    pub mutant: bool,
    /// States visited, counting revisits along different paths.
    pub states: u64,
    /// Maximal sequences explored.
    pub sequences: u64,
    pub violation: Option<Counterexample>,
}

impl ModelCheckReport {
    pub fn passed(&self) -> bool {
        self.violation.is_none()
    }
}

/// Explores every interleaving up to `depth` steps (at most
/// [`MAX_DEPTH`]). With `mutant` the loop never records a dirty state.
pub fn model_check_sync_loop(depth: usize, mutant: bool) -> ModelCheckReport {
    let depth = depth.min(MAX_DEPTH);
    let mut report = ModelCheckReport { depth, mutant, states: 0, sequences: 0, violation: None };
    let world = World::initial(mutant);
    let mut path = Vec::new();
    if let Err(inv) = world.check(0) {
        report.violation = Some(Counterexample { invariant: inv.into(), steps: path });
        return report;
    }
    explore(&world, depth, &mut path, &mut report);
    report
}

fn explore(w: &World, remaining: usize, path: &mut Vec<Step>, report: &mut ModelCheckReport) -> bool {
    report.states += 1;
    let steps = if remaining == 0 { Vec::new() } else { w.enabled() };
    if steps.is_empty() {
        report.sequences += 1;
        if let Err(inv) = w.check_drained() {
            report.violation = Some(Counterexample { invariant: inv.into(), steps: path.clone() });
            return false;
        }
        return true;
    }
    for step in steps {
        let mut next = w.clone();
        next.step(step);
        path.push(step);
        if let Err(inv) = next.check(w.agent.ts) {
            report.violation = Some(Counterexample { invariant: inv.into(), steps: path.clone() });
            return false;
        }
        if !explore(&next, remaining - 1, path, report) {
            return false;
        }
        path.pop();
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_zero_is_trivially_fine() {
        let r = model_check_sync_loop(0, false);
        assert!(r.passed());
        assert_eq!((r.states, r.sequences), (1, 1));
    }

    #[test]
    fn depth_six_passes() {
        let r = model_check_sync_loop(6, false);
        assert!(r.passed(), "{:?}", r.violation);
        assert!(r.sequences > 100);
    }

    #[test]
    fn mutant_without_dirty_state_is_caught() {
        let r = model_check_sync_loop(8, true);
        let cx = r.violation.expect("counterexample");
        assert!(cx.invariant.contains("completeness"), "{}", cx.invariant);
        // Replaying the counterexample on the correct loop is fine.
        let mut w = World::initial(false);
        for s in &cx.steps {
            w.step(*s);
            w.check(0).unwrap();
        }
    }
}
