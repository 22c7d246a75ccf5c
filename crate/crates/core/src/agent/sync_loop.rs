//! The agent's synchronization state machine.
//!
//! [`AgentState::handle_event`] is pure: it mutates the state and returns
//! the activities to spawn. The runtime and the simulator both drive it.

use crate::model::{
    ClientStateSnapshot, DocumentId, Millis, ResultSubmission, StatusSubmission, TaskStatus,
    TaskSummary, TreeValue,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingResult {
    pub seq: u64,
    pub value: TreeValue,
    pub produced_at: Millis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalTaskEntry {
    pub task_id: DocumentId,
    /// Ascending, contiguous, all `>= submitted_count`.
    pub pending_results: Vec<PendingResult>,
    pub pending_status: Option<(TaskStatus, Option<String>)>,
    /// Results the server is known to hold.
    pub submitted_count: u64,
    pub running: bool,
}

impl LocalTaskEntry {
    pub fn new(task_id: DocumentId, submitted_count: u64) -> Self {
        Self { task_id, pending_results: Vec::new(), pending_status: None, submitted_count, running: false }
    }

    /// The seq the next locally produced result should carry.
    pub fn next_seq(&self) -> u64 {
        self.pending_results.last().map_or(self.submitted_count, |r| r.seq + 1)
    }

    pub fn has_pending(&self) -> bool {
        !self.pending_results.is_empty() || self.pending_status.is_some()
    }

    /// Drops results the server already holds.
    fn absorb_count(&mut self, count: u64) -> bool {
        if count <= self.submitted_count {
            return false;
        }
        self.submitted_count = count;
        self.pending_results.retain(|r| r.seq >= count);
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TaskOutput {
    Result { seq: u64, value: TreeValue, produced_at: Millis },
    Status { status: TaskStatus, error_log: Option<String> },
}

/// What a reconciliation pass changed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalSync {
    pub started: Vec<DocumentId>,
    pub stopped: Vec<DocumentId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AgentEvent {
    ClockFromBus { ts: u64 },
    NewState(ClientStateSnapshot),
    LocalTasksSynced(LocalSync),
    TaskOutput { task_id: DocumentId, output: TaskOutput },
}

/// The per-task facts reconciliation needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalView {
    pub running: bool,
    pub has_status: bool,
    pub next_seq: u64,
}

/// Everything a submit sends; built from one state snapshot.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SubmitPlan {
    pub results: Vec<ResultSubmission>,
    pub statuses: Vec<StatusSubmission>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Effect {
    FetchState,
    Submit(SubmitPlan),
    SyncContainers { snapshot: ClientStateSnapshot, locals: BTreeMap<DocumentId, LocalView> },
    /// The server holds `count` results of the task; trim the durable cache.
    Confirmed { task_id: DocumentId, count: u64 },
    /// Nothing more will be sent for the task.
    Forget { task_id: DocumentId },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub ts: u64,
    pub tasks: Vec<TaskSummary>,
    pub local_tasks: BTreeMap<DocumentId, LocalTaskEntry>,
    pub syncing_state: bool,
    pub dirty_state: bool,
    pub syncing_locals: bool,
    /// A reconciliation was requested while one was running.
    pub reconcile_pending: bool,
}

impl AgentState {
    /// State after replaying the durable cache: one fetch is always
    /// issued, and a submit follows it if anything is pending.
    pub fn recovered(local_tasks: BTreeMap<DocumentId, LocalTaskEntry>) -> (Self, Vec<Effect>) {
        let dirty = local_tasks.values().any(LocalTaskEntry::has_pending);
        let state = AgentState { local_tasks, syncing_state: true, dirty_state: dirty, ..Default::default() };
        (state, vec![Effect::FetchState])
    }

    pub fn submit_plan(&self) -> SubmitPlan {
        let mut plan = SubmitPlan::default();
        for entry in self.local_tasks.values() {
            for r in &entry.pending_results {
                plan.results.push(ResultSubmission {
                    task_id: entry.task_id,
                    seq: r.seq,
                    value: r.value.clone(),
                    produced_at: r.produced_at,
                });
            }
            if let Some((status, log)) = &entry.pending_status {
                plan.statuses.push(StatusSubmission { task_id: entry.task_id, status: *status, error_log: log.clone() });
            }
        }
        plan
    }

    pub fn local_views(&self) -> BTreeMap<DocumentId, LocalView> {
        self.local_tasks
            .iter()
            .map(|(id, e)| {
                (*id, LocalView { running: e.running, has_status: e.pending_status.is_some(), next_seq: e.next_seq() })
            })
            .collect()
    }

    fn snapshot(&self) -> ClientStateSnapshot {
        ClientStateSnapshot { ts: self.ts, tasks: self.tasks.clone() }
    }

    fn request_reconcile(&mut self, effects: &mut Vec<Effect>) {
        if self.syncing_locals {
            self.reconcile_pending = true;
        } else {
            self.syncing_locals = true;
            effects.push(Effect::SyncContainers { snapshot: self.snapshot(), locals: self.local_views() });
        }
    }

    /// Asks for a reconciliation outside the event flow, e.g. once task
    /// starts can resume after the outbox recovered.
    pub fn request_local_sync(&mut self) -> Vec<Effect> {
        let mut effects = Vec::new();
        if !self.syncing_state {
            self.request_reconcile(&mut effects);
        }
        effects
    }

    fn request_submit(&mut self, effects: &mut Vec<Effect>) {
        if self.syncing_state {
            self.dirty_state = true;
        } else {
            self.syncing_state = true;
            effects.push(Effect::Submit(self.submit_plan()));
        }
    }

    /// Folds server confirmation into local entries.
    fn absorb(&mut self, s: &ClientStateSnapshot, effects: &mut Vec<Effect>) {
        let mut gone = Vec::new();
        for (id, entry) in self.local_tasks.iter_mut() {
            match s.task(id) {
                Some(summary) => {
                    if entry.absorb_count(summary.result_count) {
                        effects.push(Effect::Confirmed { task_id: *id, count: summary.result_count });
                    }
                }
                // Terminal on the server; a running sandbox is left for
                // reconciliation to stop.
                None if !entry.running => gone.push(*id),
                None => {}
            }
        }
        for id in gone {
            self.local_tasks.remove(&id);
            effects.push(Effect::Forget { task_id: id });
        }
    }

    pub fn handle_event(&mut self, ev: AgentEvent) -> Vec<Effect> {
        let mut effects = Vec::new();
        match ev {
            AgentEvent::ClockFromBus { ts } => {
                if ts > self.ts {
                    self.ts = ts;
                    if !self.syncing_state {
                        self.syncing_state = true;
                        effects.push(Effect::FetchState);
                    }
                }
            }
            AgentEvent::NewState(s) => {
                if s.ts >= self.ts {
                    self.ts = s.ts;
                    self.tasks = s.tasks.clone();
                    self.absorb(&s, &mut effects);
                    if self.dirty_state {
                        self.dirty_state = false;
                        effects.push(Effect::Submit(self.submit_plan()));
                    } else {
                        self.syncing_state = false;
                        self.request_reconcile(&mut effects);
                    }
                } else {
                    effects.push(Effect::FetchState);
                }
            }
            AgentEvent::LocalTasksSynced(sync) => {
                self.syncing_locals = false;
                for id in sync.started {
                    let count = self.tasks.iter().find(|t| t.task_id == id).map_or(0, |t| t.result_count);
                    let entry = self.local_tasks.entry(id).or_insert_with(|| LocalTaskEntry::new(id, count));
                    // The sandbox may already have exited.
                    entry.running = entry.pending_status.is_none();
                }
                for id in sync.stopped {
                    if self.local_tasks.remove(&id).is_some() {
                        effects.push(Effect::Forget { task_id: id });
                    }
                }
                if self.reconcile_pending {
                    self.reconcile_pending = false;
                    self.request_reconcile(&mut effects);
                }
            }
            AgentEvent::TaskOutput { task_id, output } => {
                if !self.local_tasks.contains_key(&task_id) {
                    // Output can beat the LocalTasksSynced that reports the
                    // sandbox's start.
                    match self.tasks.iter().find(|t| t.task_id == task_id) {
                        Some(t) => {
                            let mut entry = LocalTaskEntry::new(task_id, t.result_count);
                            entry.running = true;
                            self.local_tasks.insert(task_id, entry);
                        }
                        None => {
                            tracing::warn!(task = %task_id, "dropping output for a task that is not active");
                            effects.push(Effect::Forget { task_id });
                            return effects;
                        }
                    }
                }
                let entry = self.local_tasks.get_mut(&task_id).expect("entry present");
                match output {
                    TaskOutput::Result { seq, value, produced_at } => {
                        if seq < entry.next_seq() {
                            tracing::debug!(task = %task_id, seq, "ignoring already known result");
                            return effects;
                        }
                        entry.pending_results.push(PendingResult { seq, value, produced_at });
                    }
                    TaskOutput::Status { status, error_log } => {
                        entry.pending_status = Some((status, error_log));
                        entry.running = false;
                    }
                }
                self.request_submit(&mut effects);
            }
        }
        effects
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StartPlan {
    pub task: TaskSummary,
    pub base_seq: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReconcilePlan {
    pub start: Vec<StartPlan>,
    pub stop: Vec<DocumentId>,
}

/// Which sandboxes to start and stop so local execution matches the
/// server's active set.
pub fn plan_reconcile(snapshot: &ClientStateSnapshot, locals: &BTreeMap<DocumentId, LocalView>) -> ReconcilePlan {
    let mut plan = ReconcilePlan::default();
    for task in &snapshot.tasks {
        let base_seq = match locals.get(&task.task_id) {
            None => task.result_count,
            Some(v) if !v.running && !v.has_status => task.result_count.max(v.next_seq),
            Some(_) => continue,
        };
        plan.start.push(StartPlan { task: task.clone(), base_seq });
    }
    for (id, view) in locals {
        if view.running && snapshot.task(id).is_none() {
            plan.stop.push(*id);
        }
    }
    plan
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn id(n: u8) -> DocumentId {
        DocumentId::from_bytes([n; 16])
    }

    fn summary(n: u8, count: u64) -> TaskSummary {
        TaskSummary { task_id: id(n), payload_id: id(100), parameters_id: None, result_count: count }
    }

    fn snap(ts: u64, tasks: Vec<TaskSummary>) -> ClientStateSnapshot {
        ClientStateSnapshot { ts, tasks }
    }

    fn result(seq: u64) -> TaskOutput {
        TaskOutput::Result { seq, value: json!(seq), produced_at: 0 }
    }

    fn kinds(effects: &[Effect]) -> Vec<&'static str> {
        effects
            .iter()
            .map(|e| match e {
                Effect::FetchState => "fetch",
                Effect::Submit(_) => "submit",
                Effect::SyncContainers { .. } => "sync",
                Effect::Confirmed { .. } => "confirmed",
                Effect::Forget { .. } => "forget",
            })
            .collect()
    }

    fn running(n: u8, count: u64) -> (DocumentId, LocalTaskEntry) {
        let mut e = LocalTaskEntry::new(id(n), count);
        e.running = true;
        (id(n), e)
    }

    #[test]
    fn stale_clock_is_ignored() {
        let mut s = AgentState { ts: 4, ..Default::default() };
        let before = s.clone();
        assert!(s.handle_event(AgentEvent::ClockFromBus { ts: 3 }).is_empty());
        assert!(s.handle_event(AgentEvent::ClockFromBus { ts: 4 }).is_empty());
        assert_eq!(s, before);
    }

    #[test]
    fn newer_clock_fetches_once() {
        let mut s = AgentState { ts: 4, ..Default::default() };
        assert_eq!(kinds(&s.handle_event(AgentEvent::ClockFromBus { ts: 5 })), ["fetch"]);
        assert!(s.syncing_state);
        assert_eq!(s.ts, 5);
        // A second bump while fetching only raises ts.
        assert!(s.handle_event(AgentEvent::ClockFromBus { ts: 6 }).is_empty());
        assert_eq!(s.ts, 6);
    }

    #[test]
    fn output_during_sync_marks_dirty() {
        let mut s = AgentState { ts: 4, syncing_state: true, local_tasks: [running(1, 0)].into(), ..Default::default() };
        let effects = s.handle_event(AgentEvent::TaskOutput { task_id: id(1), output: result(0) });
        assert!(effects.is_empty());
        assert!(s.dirty_state);
        assert_eq!(s.local_tasks[&id(1)].pending_results.len(), 1);
    }

    #[test]
    fn dirty_new_state_resubmits() {
        let mut s = AgentState { ts: 4, syncing_state: true, dirty_state: true, local_tasks: [running(1, 0)].into(), ..Default::default() };
        s.local_tasks.get_mut(&id(1)).unwrap().pending_results.push(PendingResult { seq: 0, value: json!(0), produced_at: 0 });
        let effects = s.handle_event(AgentEvent::NewState(snap(5, vec![summary(1, 0)])));
        assert_eq!(kinds(&effects), ["submit"]);
        assert_eq!(s.ts, 5);
        assert_eq!(s.tasks, vec![summary(1, 0)]);
        assert!(!s.dirty_state);
        assert!(s.syncing_state);
        let Effect::Submit(plan) = &effects[0] else { unreachable!() };
        assert_eq!(plan.results.len(), 1);
    }

    #[test]
    fn clean_new_state_reconciles() {
        let mut s = AgentState { ts: 4, syncing_state: true, ..Default::default() };
        let effects = s.handle_event(AgentEvent::NewState(snap(4, vec![summary(1, 0)])));
        assert_eq!(kinds(&effects), ["sync"]);
        assert!(!s.syncing_state);
        assert!(s.syncing_locals);
    }

    #[test]
    fn stale_state_refetches() {
        let mut s = AgentState { ts: 7, syncing_state: true, ..Default::default() };
        let effects = s.handle_event(AgentEvent::NewState(snap(6, vec![summary(1, 0)])));
        assert_eq!(kinds(&effects), ["fetch"]);
        assert_eq!(s.ts, 7);
        assert!(s.tasks.is_empty());
    }

    #[test]
    fn reconcile_while_reconciling_is_deferred() {
        let mut s = AgentState { ts: 4, syncing_state: true, syncing_locals: true, ..Default::default() };
        assert!(s.handle_event(AgentEvent::NewState(snap(4, vec![summary(1, 0)]))).is_empty());
        assert!(s.reconcile_pending);
        let effects = s.handle_event(AgentEvent::LocalTasksSynced(LocalSync::default()));
        assert_eq!(kinds(&effects), ["sync"]);
        assert!(s.syncing_locals && !s.reconcile_pending);
    }

    #[test]
    fn idle_output_submits() {
        let mut s = AgentState { ts: 4, local_tasks: [running(1, 0)].into(), ..Default::default() };
        let effects = s.handle_event(AgentEvent::TaskOutput {
            task_id: id(1),
            output: TaskOutput::Status { status: TaskStatus::Finished, error_log: None },
        });
        assert_eq!(kinds(&effects), ["submit"]);
        assert!(s.syncing_state);
        assert!(!s.local_tasks[&id(1)].running);
    }

    #[test]
    fn confirmation_trims_and_forgets() {
        let mut s = AgentState { ts: 4, syncing_state: true, local_tasks: [running(1, 0), running(2, 0)].into(), ..Default::default() };
        for seq in 0..3 {
            s.local_tasks.get_mut(&id(1)).unwrap().pending_results.push(PendingResult { seq, value: json!(seq), produced_at: 0 });
        }
        let e2 = s.local_tasks.get_mut(&id(2)).unwrap();
        e2.pending_status = Some((TaskStatus::Finished, None));
        e2.running = false;
        let effects = s.handle_event(AgentEvent::NewState(snap(6, vec![summary(1, 2)])));
        assert_eq!(effects[0], Effect::Confirmed { task_id: id(1), count: 2 });
        assert_eq!(effects[1], Effect::Forget { task_id: id(2) });
        assert_eq!(s.local_tasks[&id(1)].pending_results.iter().map(|r| r.seq).collect::<Vec<_>>(), vec![2]);
        assert_eq!(s.local_tasks[&id(1)].submitted_count, 2);
        assert!(!s.local_tasks.contains_key(&id(2)));
    }

    #[test]
    fn early_output_creates_entry_and_unknown_is_dropped() {
        let mut s = AgentState { ts: 4, tasks: vec![summary(1, 3)], syncing_state: true, ..Default::default() };
        s.handle_event(AgentEvent::TaskOutput { task_id: id(1), output: result(3) });
        assert_eq!(s.local_tasks[&id(1)].submitted_count, 3);
        assert!(s.local_tasks[&id(1)].running);
        assert!(s.dirty_state);

        let effects = s.handle_event(AgentEvent::TaskOutput { task_id: id(9), output: result(0) });
        assert_eq!(effects, vec![Effect::Forget { task_id: id(9) }]);
        assert!(!s.local_tasks.contains_key(&id(9)));
    }

    #[test]
    fn duplicate_results_are_ignored() {
        let mut s = AgentState { ts: 4, syncing_state: true, local_tasks: [running(1, 2)].into(), ..Default::default() };
        assert!(s.handle_event(AgentEvent::TaskOutput { task_id: id(1), output: result(1) }).is_empty());
        assert!(!s.dirty_state);
        assert!(s.local_tasks[&id(1)].pending_results.is_empty());
    }

    #[test]
    fn synced_merges_starts_and_stops() {
        let mut s = AgentState { ts: 4, tasks: vec![summary(1, 2)], syncing_locals: true, local_tasks: [running(3, 0)].into(), ..Default::default() };
        let effects = s.handle_event(AgentEvent::LocalTasksSynced(LocalSync { started: vec![id(1)], stopped: vec![id(3)] }));
        assert_eq!(effects, vec![Effect::Forget { task_id: id(3) }]);
        assert_eq!(s.local_tasks.keys().copied().collect::<Vec<_>>(), vec![id(1)]);
        assert_eq!(s.local_tasks[&id(1)].submitted_count, 2);
        assert!(s.local_tasks[&id(1)].running);
        assert!(!s.syncing_locals);
    }

    #[test]
    fn start_reported_after_exit_stays_stopped() {
        let mut s = AgentState { ts: 4, tasks: vec![summary(1, 0)], syncing_locals: true, ..Default::default() };
        s.handle_event(AgentEvent::TaskOutput {
            task_id: id(1),
            output: TaskOutput::Status { status: TaskStatus::Finished, error_log: None },
        });
        s.handle_event(AgentEvent::LocalTasksSynced(LocalSync { started: vec![id(1)], stopped: vec![] }));
        assert!(!s.local_tasks[&id(1)].running);
    }

    #[test]
    fn recovery_fetches_then_submits() {
        let mut entry = LocalTaskEntry::new(id(1), 0);
        entry.pending_results.push(PendingResult { seq: 0, value: json!(1), produced_at: 0 });
        let (mut s, effects) = AgentState::recovered([(id(1), entry)].into());
        assert_eq!(kinds(&effects), ["fetch"]);
        assert!(s.dirty_state);
        // The server already holds seq 0 (sent before a crash).
        let effects = s.handle_event(AgentEvent::NewState(snap(2, vec![summary(1, 1)])));
        assert_eq!(kinds(&effects), ["confirmed", "submit"]);
        let Effect::Submit(plan) = &effects[1] else { unreachable!() };
        assert!(plan.results.is_empty());

        let (s2, _) = AgentState::recovered(BTreeMap::new());
        assert!(!s2.dirty_state && s2.syncing_state);
    }

    #[test]
    fn plan_starts_new_and_crashed_tasks_and_stops_canceled() {
        let snapshot = snap(5, vec![summary(1, 0), summary(2, 4), summary(3, 1), summary(4, 0)]);
        let locals: BTreeMap<DocumentId, LocalView> = [
            (id(2), LocalView { running: false, has_status: false, next_seq: 6 }),
            (id(3), LocalView { running: true, has_status: false, next_seq: 1 }),
            (id(4), LocalView { running: false, has_status: true, next_seq: 0 }),
            (id(5), LocalView { running: true, has_status: false, next_seq: 0 }),
            (id(6), LocalView { running: false, has_status: false, next_seq: 0 }),
        ]
        .into();
        let plan = plan_reconcile(&snapshot, &locals);
        assert_eq!(
            plan.start.iter().map(|p| (p.task.task_id, p.base_seq)).collect::<Vec<_>>(),
            vec![(id(1), 0), (id(2), 6)]
        );
        assert_eq!(plan.stop, vec![id(5)]);
    }
}
