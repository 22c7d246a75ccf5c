//! Replays one randomized request schedule against a single server node and
//! against two nodes sharing a store, with requests routed at random, and
//! compares everything observable.

use crate::bus::MemoryBus;
use crate::clock::ManualClock;
use crate::model::{
    canonical_json, ClientId, CommitBatch, DocumentId, NewAssignment, NewParameters, NewPayload, NewTask,
    ResultSubmission, StatusSubmission, SubmitBatch, TaskStatus,
};
use crate::rpc::{RpcHandler, RpcRequest};
use crate::server::{method, Authenticator, CancelParams, FetchStateParams, GetParametersParams, GetPayloadParams, ServerNode};
use crate::store::{MemoryStore, QueryFilter, StateStore};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use std::sync::Arc;

const CLIENTS: [&str; 3] = ["alpha", "beta", "gamma"];
const USER_TOKEN: &str = "user";

fn token(client: &str) -> String {
    format!("tok-{client}")
}

/// `requests` RPC requests drawn from `seed`. Ids, seqs and targets are
/// chosen without looking at responses, so some requests fail on purpose.
pub fn request_schedule(seed: u64, requests: usize) -> Vec<RpcRequest> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut payloads: Vec<DocumentId> = Vec::new();
    let mut params: Vec<DocumentId> = Vec::new();
    let mut tasks: Vec<(DocumentId, &str, DocumentId)> = Vec::new();
    let mut assignments: Vec<DocumentId> = Vec::new();
    let mut out = Vec::with_capacity(requests);
    for id in 0..requests as u64 {
        let roll = rng.gen_range(0..100);
        let (method, token, params) = if roll < 15 || tasks.is_empty() {
            let mut batch = CommitBatch::default();
            let payload = DocumentId::generate(&mut rng).unwrap();
            batch.payloads.push(NewPayload { id: payload, name: format!("p{id}"), body: format!("print({id})") });
            let parameters = rng.gen_bool(0.5).then(|| DocumentId::generate(&mut rng).unwrap());
            if let Some(p) = parameters {
                batch.parameters.push(NewParameters { id: p, value: json!({"n": id}) });
            }
            let assignment = DocumentId::generate(&mut rng).unwrap();
            let n = rng.gen_range(1..=3);
            let mut ids = Vec::new();
            for _ in 0..n {
                let task = DocumentId::generate(&mut rng).unwrap();
                // An unknown client now and then makes the whole commit fail.
                let client = if rng.gen_bool(0.05) { "nobody" } else { CLIENTS[rng.gen_range(0..CLIENTS.len())] };
                batch.tasks.push(NewTask {
                    id: task,
                    assignment_id: assignment,
                    client_id: ClientId::new(client).unwrap(),
                    payload_id: payload,
                    parameters_id: parameters,
                });
                ids.push(task);
                tasks.push((task, client, payload));
            }
            batch.assignments.push(NewAssignment { id: assignment, name: format!("a{id}"), task_ids: ids });
            payloads.push(payload);
            params.extend(parameters);
            assignments.push(assignment);
            (method::COMMIT, USER_TOKEN.to_owned(), serde_json::to_value(batch).unwrap())
        } else if roll < 50 {
            let (task, client, _) = *tasks.choose(&mut rng).unwrap();
            let client = if client == "nobody" { CLIENTS[0] } else { client };
            let results = (0..rng.gen_range(0..3))
                .map(|_| {
                    let seq = rng.gen_range(0..4);
                    ResultSubmission { task_id: task, seq, value: json!({"seq": seq}), produced_at: id }
                })
                .collect();
            let statuses = match rng.gen_range(0..10) {
                0 => vec![StatusSubmission { task_id: task, status: TaskStatus::Finished, error_log: None }],
                1 => vec![StatusSubmission { task_id: task, status: TaskStatus::Error, error_log: Some("boom".into()) }],
                _ => Vec::new(),
            };
            let batch = SubmitBatch { client_id: ClientId::new(client).unwrap(), results, statuses };
            (method::SUBMIT, token(client), serde_json::to_value(batch).unwrap())
        } else if roll < 65 {
            let client = CLIENTS[rng.gen_range(0..CLIENTS.len())];
            let params = FetchStateParams { client_id: ClientId::new(client).unwrap() };
            (method::FETCH_STATE, token(client), serde_json::to_value(params).unwrap())
        } else if roll < 75 {
            let (task, _, _) = *tasks.choose(&mut rng).unwrap();
            (method::CANCEL, USER_TOKEN.to_owned(), serde_json::to_value(CancelParams { task_id: task }).unwrap())
        } else if roll < 85 {
            let filter = match rng.gen_range(0..4) {
                0 => QueryFilter::tasks_of(*assignments.choose(&mut rng).unwrap()),
                1 => QueryFilter::results_of_task(tasks.choose(&mut rng).unwrap().0),
                2 => QueryFilter::results_of_assignment(*assignments.choose(&mut rng).unwrap()),
                _ => QueryFilter::clients(rng.gen_bool(0.5)),
            };
            (method::QUERY, USER_TOKEN.to_owned(), serde_json::to_value(filter).unwrap())
        } else if roll < 95 || params.is_empty() {
            let p = *payloads.choose(&mut rng).unwrap();
            let client = CLIENTS[rng.gen_range(0..CLIENTS.len())];
            (method::GET_PAYLOAD, token(client), serde_json::to_value(GetPayloadParams { payload_id: p }).unwrap())
        } else {
            let p = *params.choose(&mut rng).unwrap();
            let client = CLIENTS[rng.gen_range(0..CLIENTS.len())];
            (method::GET_PARAMETERS, token(client), serde_json::to_value(GetParametersParams { parameters_id: p }).unwrap())
        };
        out.push(RpcRequest { id, method: method.to_owned(), params, token });
    }
    out
}

/// Everything a caller or subscriber could observe from one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub responses: Vec<String>,
    pub bus_frames: Vec<String>,
    pub store: String,
    /// Requests handled by each node.
    pub per_node: Vec<u64>,
}

fn node_load(node: &ServerNode) -> u64 {
    [
        method::COMMIT,
        method::SUBMIT,
        method::FETCH_STATE,
        method::CANCEL,
        method::QUERY,
        method::GET_PAYLOAD,
        method::GET_PARAMETERS,
    ]
    .iter()
    .map(|m| node.metrics().count(m))
    .sum()
}

/// Runs `schedule` on `nodes` server replicas over one store. With more
/// than one replica each request goes to a node picked by `routing_seed`.
pub fn execute(schedule: &[RpcRequest], nodes: usize, routing_seed: u64) -> Observation {
    let clock = Arc::new(ManualClock::new(1_700_000_000_000));
    let store: Arc<dyn StateStore> = Arc::new(MemoryStore::new(clock.clone()));
    let bus = Arc::new(MemoryBus::new());
    bus.start_capture();
    let mut auth = Authenticator::new().with_user(USER_TOKEN);
    for c in CLIENTS {
        auth = auth.with_client(ClientId::new(c).unwrap(), &token(c));
    }
    let first = ServerNode::new(store.clone(), bus.clone(), auth).expect("memory store");
    let replicas: Vec<ServerNode> =
        (0..nodes.max(1)).map(|i| if i == 0 { first.clone() } else { first.replica() }).collect();
    let mut route = ChaCha8Rng::seed_from_u64(routing_seed);
    let mut responses = Vec::with_capacity(schedule.len());
    for req in schedule {
        clock.advance(10);
        let node = &replicas[route.gen_range(0..replicas.len())];
        responses.push(canonical_json(&node.handle(req.clone())));
    }
    Observation {
        responses,
        bus_frames: bus.captured().iter().map(canonical_json).collect(),
        store: canonical_json(&store.dump()),
        per_node: replicas.iter().map(node_load).collect(),
    }
}

/// True when two randomly routed replicas behave exactly like one node.
pub fn stateless_equivalent(seed: u64, requests: usize) -> bool {
    let schedule = request_schedule(seed, requests);
    let single = execute(&schedule, 1, seed);
    let pair = execute(&schedule, 2, seed.wrapping_add(1));
    single.responses == pair.responses && single.bus_frames == pair.bus_frames && single.store == pair.store
}
