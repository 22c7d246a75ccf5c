//! Stateless request handlers.
//!
//! A [`ServerNode`] holds nothing but handles to the store and the bus, so
//! any number of nodes can serve the same deployment. Every request is
//! authenticated before the store is touched.

mod auth;
pub mod http;

pub use auth::{Authenticator, Principal};

use crate::bus::{Publisher, UserEvent};
use crate::error::ApiError;
use crate::model::{
    ClientId, ClientStateSnapshot, CommitBatch, DocumentId, ParametersDoc, PayloadDoc,
    SubmitBatch, TaskStatus,
};
use crate::rpc::{RpcHandler, RpcRequest, RpcResponse};
use crate::store::{AppendOutcome, QueryFilter, QueryResult, StateStore, StatusOutcome};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;

pub const DEFAULT_MAX_PAYLOAD_BYTES: usize = 4 * 1024 * 1024;

pub mod method {
    pub const FETCH_STATE: &str = "fetch_state";
    pub const SUBMIT: &str = "submit";
    pub const GET_PAYLOAD: &str = "get_payload";
    pub const GET_PARAMETERS: &str = "get_parameters";
    pub const COMMIT: &str = "commit";
    pub const CANCEL: &str = "cancel";
    pub const QUERY: &str = "query";
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FetchStateParams {
    pub client_id: ClientId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GetPayloadParams {
    pub payload_id: DocumentId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GetParametersParams {
    pub parameters_id: DocumentId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CancelParams {
    pub task_id: DocumentId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitReply {
    pub ids: Vec<DocumentId>,
}

/// Per-method request counters.
#[derive(Debug, Default)]
pub struct ServerMetrics {
    counts: Mutex<BTreeMap<&'static str, u64>>,
}

impl ServerMetrics {
    fn bump(&self, method: &'static str) {
        *self.counts.lock().entry(method).or_default() += 1;
    }

    pub fn count(&self, method: &str) -> u64 {
        self.counts.lock().get(method).copied().unwrap_or(0)
    }
}

#[derive(Clone)]
pub struct ServerNode {
    store: Arc<dyn StateStore>,
    bus: Arc<dyn Publisher>,
    auth: Arc<Authenticator>,
    metrics: Arc<ServerMetrics>,
    max_payload_bytes: usize,
}

impl ServerNode {
    /// Registers every client known to `auth` in the store.
    pub fn new(
        store: Arc<dyn StateStore>,
        bus: Arc<dyn Publisher>,
        auth: Authenticator,
    ) -> Result<Self, ApiError> {
        for client in auth.clients() {
            store.register_client(client)?;
        }
        Ok(Self {
            store,
            bus,
            auth: Arc::new(auth),
            metrics: Arc::new(ServerMetrics::default()),
            max_payload_bytes: DEFAULT_MAX_PAYLOAD_BYTES,
        })
    }

    pub fn with_max_payload_bytes(mut self, cap: usize) -> Self {
        self.max_payload_bytes = cap;
        self
    }

    /// Another stateless node over the same store and bus, with its own
    /// metrics.
    pub fn replica(&self) -> Self {
        Self { metrics: Arc::new(ServerMetrics::default()), ..self.clone() }
    }

    pub fn metrics(&self) -> &ServerMetrics {
        &self.metrics
    }

    pub fn store(&self) -> &Arc<dyn StateStore> {
        &self.store
    }

    fn principal(&self, token: &str) -> Result<Principal, ApiError> {
        self.auth
            .authenticate(token)
            .ok_or_else(|| ApiError::unauthenticated("missing or unknown token"))
    }

    fn require_client(&self, token: &str, client: &ClientId) -> Result<(), ApiError> {
        match self.principal(token)? {
            Principal::Client(c) if &c == client => Ok(()),
            _ => Err(ApiError::unauthenticated(format!("token is not valid for client {client}"))),
        }
    }

    fn require_user(&self, token: &str) -> Result<(), ApiError> {
        match self.principal(token)? {
            Principal::User => Ok(()),
            Principal::Client(_) => Err(ApiError::unauthenticated("user token required")),
        }
    }

    fn notify_clock(&self, client: &ClientId, ts: u64) {
        if let Err(e) = self.bus.publish_clock(client, ts) {
            tracing::warn!(%client, ts, error = %e, "clock notification lost");
        }
    }

    fn notify_user(&self, assignment: &DocumentId, event: UserEvent) {
        if let Err(e) = self.bus.publish_user_event(assignment, event) {
            tracing::warn!(%assignment, error = %e, "user event lost");
        }
    }

    pub fn fetch_state(&self, token: &str, client: &ClientId) -> Result<ClientStateSnapshot, ApiError> {
        self.metrics.bump(method::FETCH_STATE);
        self.require_client(token, client)?;
        Ok(self.store.fetch_client_state(client)?)
    }

    pub fn submit(&self, token: &str, batch: SubmitBatch) -> Result<ClientStateSnapshot, ApiError> {
        self.metrics.bump(method::SUBMIT);
        self.require_client(token, &batch.client_id)?;

        // Validate the whole batch before applying any of it.
        let mut known = BTreeMap::new();
        let referenced = batch.results.iter().map(|r| r.task_id).chain(batch.statuses.iter().map(|s| s.task_id));
        for task_id in referenced {
            if known.contains_key(&task_id) {
                continue;
            }
            match self.store.get_task(task_id) {
                Ok(t) if t.client_id != batch.client_id => {
                    return Err(ApiError::invalid_argument(format!(
                        "task {task_id} does not belong to {}",
                        batch.client_id
                    )))
                }
                Ok(_) => {
                    known.insert(task_id, true);
                }
                Err(_) => {
                    known.insert(task_id, false);
                }
            }
        }
        if let Some(s) = batch.statuses.iter().find(|s| !matches!(s.status, TaskStatus::Finished | TaskStatus::Error)) {
            return Err(ApiError::invalid_argument(format!("clients cannot report status {}", s.status)));
        }

        for r in batch.results {
            match self.store.append_result(r.task_id, r.seq, r.value.clone(), r.produced_at)? {
                AppendOutcome::Appended { client_id, assignment_id, ts } => {
                    self.notify_clock(&client_id, ts);
                    self.notify_user(&assignment_id, UserEvent::Result { task_id: r.task_id, seq: r.seq, value: r.value });
                }
                AppendOutcome::Duplicate => {}
                AppendOutcome::Rejected(reason) => {
                    tracing::warn!(task = %r.task_id, seq = r.seq, %reason, "dropping result");
                }
            }
        }
        for s in batch.statuses {
            match self.store.set_status(s.task_id, s.status, s.error_log)? {
                StatusOutcome::Applied { client_id, assignment_id, ts } => {
                    self.notify_clock(&client_id, ts);
                    self.notify_user(&assignment_id, UserEvent::Status { task_id: s.task_id, status: s.status });
                }
                StatusOutcome::Ignored => {
                    tracing::debug!(task = %s.task_id, status = %s.status, "status change ignored");
                }
            }
        }
        Ok(self.store.fetch_client_state(&batch.client_id)?)
    }

    pub fn get_payload(&self, token: &str, id: DocumentId) -> Result<PayloadDoc, ApiError> {
        self.metrics.bump(method::GET_PAYLOAD);
        self.principal(token)?;
        Ok(self.store.get_payload(id)?)
    }

    pub fn get_parameters(&self, token: &str, id: DocumentId) -> Result<ParametersDoc, ApiError> {
        self.metrics.bump(method::GET_PARAMETERS);
        self.principal(token)?;
        Ok(self.store.get_parameters(id)?)
    }

    pub fn commit(&self, token: &str, batch: CommitBatch) -> Result<CommitReply, ApiError> {
        self.metrics.bump(method::COMMIT);
        self.require_user(token)?;
        if let Some(p) = batch.payloads.iter().find(|p| p.body.len() > self.max_payload_bytes) {
            return Err(ApiError::invalid_argument(format!(
                "payload {} is {} bytes, cap is {}",
                p.id,
                p.body.len(),
                self.max_payload_bytes
            )));
        }
        let outcome = self.store.commit_documents(batch)?;
        for (client, ts) in &outcome.clocks {
            self.notify_clock(client, *ts);
        }
        Ok(CommitReply { ids: outcome.ids })
    }

    pub fn cancel(&self, token: &str, task_id: DocumentId) -> Result<(), ApiError> {
        self.metrics.bump(method::CANCEL);
        self.require_user(token)?;
        let task = self.store.get_task(task_id)?;
        if task.status != TaskStatus::Active {
            return Err(ApiError::failed_precondition(format!("task {task_id} is {}", task.status)));
        }
        match self.store.set_status(task_id, TaskStatus::Canceled, None)? {
            StatusOutcome::Applied { client_id, assignment_id, ts } => {
                self.notify_clock(&client_id, ts);
                self.notify_user(&assignment_id, UserEvent::Status { task_id, status: TaskStatus::Canceled });
                Ok(())
            }
            StatusOutcome::Ignored => Err(ApiError::failed_precondition(format!("task {task_id} is no longer active"))),
        }
    }

    pub fn query(&self, token: &str, filter: &QueryFilter) -> Result<QueryResult, ApiError> {
        self.metrics.bump(method::QUERY);
        self.require_user(token)?;
        Ok(self.store.query(filter)?)
    }

    fn dispatch(&self, req: RpcRequest) -> Result<serde_json::Value, ApiError> {
        // Authentication precedes parameter parsing so a bad token never
        // reaches the store, whatever the params look like.
        self.principal(&req.token)?;
        fn parse<T: serde::de::DeserializeOwned>(v: serde_json::Value) -> Result<T, ApiError> {
            serde_json::from_value(v).map_err(|e| ApiError::invalid_argument(format!("bad params: {e}")))
        }
        fn to_json<T: Serialize>(v: T) -> Result<serde_json::Value, ApiError> {
            Ok(serde_json::to_value(v).expect("response serializes"))
        }
        let token = req.token.as_str();
        match req.method.as_str() {
            method::FETCH_STATE => {
                let p: FetchStateParams = parse(req.params)?;
                to_json(self.fetch_state(token, &p.client_id)?)
            }
            method::SUBMIT => to_json(self.submit(token, parse(req.params)?)?),
            method::GET_PAYLOAD => {
                let p: GetPayloadParams = parse(req.params)?;
                to_json(self.get_payload(token, p.payload_id)?)
            }
            method::GET_PARAMETERS => {
                let p: GetParametersParams = parse(req.params)?;
                to_json(self.get_parameters(token, p.parameters_id)?)
            }
            method::COMMIT => to_json(self.commit(token, parse(req.params)?)?),
            method::CANCEL => {
                let p: CancelParams = parse(req.params)?;
                self.cancel(token, p.task_id)?;
                to_json(serde_json::json!({}))
            }
            method::QUERY => {
                let filter: QueryFilter = parse(req.params)?;
                to_json(self.query(token, &filter)?)
            }
            other => Err(ApiError::invalid_argument(format!("unknown method {other:?}"))),
        }
    }
}

impl RpcHandler for ServerNode {
    fn handle(&self, request: RpcRequest) -> RpcResponse {
        let id = request.id;
        RpcResponse::from_result(id, self.dispatch(request))
    }
}
