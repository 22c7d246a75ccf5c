use super::{QueryFilter, QueryKind, QueryResult, StoreError};
use crate::model::{
    truncate_error_log, AssignmentDoc, ClientDescriptor, ClientId, ClientStateSnapshot,
    CommitBatch, DocumentId, Millis, ParametersDoc, PayloadDoc, ResultRecord, TaskDoc, TaskStatus,
    TaskSummary, TreeValue, MAX_PAYLOAD_NAME_CHARS,
};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClientRecord {
    pub ts: u64,
    pub last_seen: Option<Millis>,
}

/// A journaled state change. Replaying the same entries onto the same
/// starting state always yields the same result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Mutation {
    RegisterClient {
        client_id: ClientId,
    },
    Commit {
        batch: CommitBatch,
        at: Millis,
    },
    AppendResult {
        task_id: DocumentId,
        seq: u64,
        value: TreeValue,
        produced_at: Millis,
        recorded_at: Millis,
    },
    SetStatus {
        task_id: DocumentId,
        status: TaskStatus,
        error_log: Option<String>,
        at: Millis,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StoreState {
    pub clients: BTreeMap<ClientId, ClientRecord>,
    pub payloads: BTreeMap<DocumentId, PayloadDoc>,
    pub parameters: BTreeMap<DocumentId, ParametersDoc>,
    pub tasks: BTreeMap<DocumentId, TaskDoc>,
    pub assignments: BTreeMap<DocumentId, AssignmentDoc>,
    pub results: BTreeMap<DocumentId, Vec<ResultRecord>>,
}

impl StoreState {
    fn id_taken(&self, id: &DocumentId) -> bool {
        self.payloads.contains_key(id)
            || self.parameters.contains_key(id)
            || self.tasks.contains_key(id)
            || self.assignments.contains_key(id)
    }

    /// Validates a commit batch against the current state without touching
    /// it. Every reference must resolve within the batch or the store, and
    /// assignments are committed together with all of their tasks.
    pub fn check_commit(&self, batch: &CommitBatch) -> Result<(), StoreError> {
        let mut seen = BTreeSet::new();
        for id in batch.ids() {
            if !seen.insert(id) || self.id_taken(&id) {
                return Err(StoreError::DuplicateId(id));
            }
        }
        for p in &batch.payloads {
            if p.body.is_empty() {
                return Err(StoreError::InvalidArgument(format!("payload {} has an empty body", p.id)));
            }
            if p.name.chars().count() > MAX_PAYLOAD_NAME_CHARS {
                return Err(StoreError::InvalidArgument(format!(
                    "payload name longer than {MAX_PAYLOAD_NAME_CHARS} chars"
                )));
            }
        }
        let batch_payloads: BTreeSet<_> = batch.payloads.iter().map(|p| p.id).collect();
        let batch_params: BTreeSet<_> = batch.parameters.iter().map(|p| p.id).collect();
        let batch_assignments: BTreeMap<_, _> =
            batch.assignments.iter().map(|a| (a.id, a)).collect();
        let batch_tasks: BTreeMap<_, _> = batch.tasks.iter().map(|t| (t.id, t)).collect();

        for t in &batch.tasks {
            if !self.clients.contains_key(&t.client_id) {
                return Err(StoreError::NotFound(format!("client {}", t.client_id)));
            }
            if !batch_payloads.contains(&t.payload_id) && !self.payloads.contains_key(&t.payload_id)
            {
                return Err(StoreError::DanglingReference(format!(
                    "task {} references unknown payload {}",
                    t.id, t.payload_id
                )));
            }
            if let Some(p) = t.parameters_id {
                if !batch_params.contains(&p) && !self.parameters.contains_key(&p) {
                    return Err(StoreError::DanglingReference(format!(
                        "task {} references unknown parameters {p}",
                        t.id
                    )));
                }
            }
            let listed = batch_assignments
                .get(&t.assignment_id)
                .is_some_and(|a| a.task_ids.contains(&t.id));
            if !listed {
                return Err(StoreError::DanglingReference(format!(
                    "task {} is not listed by assignment {} in the same batch",
                    t.id, t.assignment_id
                )));
            }
        }
        for a in &batch.assignments {
            let mut unique = BTreeSet::new();
            for tid in &a.task_ids {
                if !unique.insert(tid) {
                    return Err(StoreError::InvalidArgument(format!(
                        "assignment {} lists task {tid} twice",
                        a.id
                    )));
                }
                match batch_tasks.get(tid) {
                    Some(t) if t.assignment_id == a.id => {}
                    _ => {
                        return Err(StoreError::DanglingReference(format!(
                            "assignment {} lists task {tid} which is not part of it",
                            a.id
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    fn bump(&mut self, client: &ClientId) {
        if let Some(c) = self.clients.get_mut(client) {
            c.ts += 1;
        }
    }

    /// Applies an already-validated mutation.
    pub fn apply(&mut self, entry: &Mutation) {
        match entry {
            Mutation::RegisterClient { client_id } => {
                self.clients.entry(client_id.clone()).or_default();
            }
            Mutation::Commit { batch, at } => {
                for p in &batch.payloads {
                    self.payloads.insert(
                        p.id,
                        PayloadDoc { id: p.id, name: p.name.clone(), body: p.body.clone(), created_at: *at },
                    );
                }
                for p in &batch.parameters {
                    self.parameters
                        .insert(p.id, ParametersDoc { id: p.id, value: p.value.clone(), created_at: *at });
                }
                let mut touched = BTreeSet::new();
                for t in &batch.tasks {
                    touched.insert(t.client_id.clone());
                    self.tasks.insert(
                        t.id,
                        TaskDoc {
                            id: t.id,
                            assignment_id: t.assignment_id,
                            client_id: t.client_id.clone(),
                            payload_id: t.payload_id,
                            parameters_id: t.parameters_id,
                            status: TaskStatus::Active,
                            result_count: 0,
                            error_log: None,
                            created_at: *at,
                            terminal_at: None,
                        },
                    );
                }
                for a in &batch.assignments {
                    self.assignments.insert(
                        a.id,
                        AssignmentDoc { id: a.id, name: a.name.clone(), task_ids: a.task_ids.clone(), created_at: *at },
                    );
                }
                for c in touched {
                    self.bump(&c);
                }
            }
            Mutation::AppendResult { task_id, seq, value, produced_at, recorded_at } => {
                let Some(task) = self.tasks.get_mut(task_id) else { return };
                if task.status != TaskStatus::Active || *seq != task.result_count {
                    return;
                }
                task.result_count += 1;
                let client = task.client_id.clone();
                self.results.entry(*task_id).or_default().push(ResultRecord {
                    task_id: *task_id,
                    seq: *seq,
                    value: value.clone(),
                    produced_at: *produced_at,
                    recorded_at: Some(*recorded_at),
                });
                self.bump(&client);
            }
            Mutation::SetStatus { task_id, status, error_log, at } => {
                let Some(task) = self.tasks.get_mut(task_id) else { return };
                if !crate::model::validate_transition(task.status, *status) {
                    return;
                }
                task.status = *status;
                task.terminal_at = Some(*at);
                task.error_log = if *status == TaskStatus::Error {
                    let log = error_log.as_deref().unwrap_or_default();
                    Some(if log.is_empty() { "(no log captured)".to_owned() } else { truncate_error_log(log) })
                } else {
                    None
                };
                let client = task.client_id.clone();
                self.bump(&client);
            }
        }
    }

    pub fn snapshot_of(&self, client: &ClientId) -> ClientStateSnapshot {
        let ts = self.clients.get(client).map(|c| c.ts).unwrap_or(0);
        let mut active: Vec<&TaskDoc> = self
            .tasks
            .values()
            .filter(|t| &t.client_id == client && t.status == TaskStatus::Active)
            .collect();
        active.sort_by_key(|t| (t.created_at, t.id));
        ClientStateSnapshot {
            ts,
            tasks: active
                .into_iter()
                .map(|t| TaskSummary {
                    task_id: t.id,
                    payload_id: t.payload_id,
                    parameters_id: t.parameters_id,
                    result_count: t.result_count,
                })
                .collect(),
        }
    }

    fn in_range(filter: &QueryFilter, at: Option<Millis>) -> bool {
        match at {
            Some(at) => {
                filter.since.map_or(true, |s| at >= s) && filter.until.map_or(true, |u| at < u)
            }
            None => filter.since.is_none() && filter.until.is_none(),
        }
    }

    fn tasks_matching<'a>(&'a self, filter: &'a QueryFilter) -> impl Iterator<Item = &'a TaskDoc> + 'a {
        let order: Vec<&TaskDoc> = match filter.assignment {
            Some(a) => self
                .assignments
                .get(&a)
                .map(|a| a.task_ids.iter().filter_map(|id| self.tasks.get(id)).collect())
                .unwrap_or_default(),
            None => {
                let mut all: Vec<_> = self.tasks.values().collect();
                all.sort_by_key(|t| (t.created_at, t.id));
                all
            }
        };
        order.into_iter().filter(move |t| {
            filter.task.map_or(true, |id| id == t.id)
                && filter.client.as_ref().map_or(true, |c| c == &t.client_id)
                && filter.status.map_or(true, |s| s == t.status)
        })
    }

    pub fn query(&self, filter: &QueryFilter, now: Millis, online_window_ms: u64) -> QueryResult {
        match filter.kind {
            QueryKind::Tasks => QueryResult::Tasks(
                self.tasks_matching(filter)
                    .filter(|t| Self::in_range(filter, Some(t.created_at)))
                    .cloned()
                    .collect(),
            ),
            QueryKind::Results => {
                let scoped = QueryFilter { since: None, until: None, ..filter.clone() };
                let records = self
                    .tasks_matching(&scoped)
                    .flat_map(|t| self.results.get(&t.id).into_iter().flatten())
                    .filter(|r| Self::in_range(filter, r.recorded_at))
                    .cloned()
                    .collect();
                QueryResult::Results(records)
            }
            QueryKind::Clients => QueryResult::Clients(
                self.clients
                    .iter()
                    .filter(|(id, _)| filter.client.as_ref().map_or(true, |c| c == *id))
                    .map(|(id, rec)| {
                        let online = rec
                            .last_seen
                            .is_some_and(|seen| now.saturating_sub(seen) <= online_window_ms);
                        ClientDescriptor { client_id: id.clone(), ts: rec.ts, last_seen: rec.last_seen, online }
                    })
                    .filter(|d| !filter.online_only || d.online)
                    .collect(),
            ),
            QueryKind::Assignments => QueryResult::Assignments(
                self.assignments
                    .values()
                    .filter(|a| filter.assignment.map_or(true, |id| id == a.id))
                    .filter(|a| Self::in_range(filter, Some(a.created_at)))
                    .cloned()
                    .collect(),
            ),
        }
    }
}
