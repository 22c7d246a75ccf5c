use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use serde_json::json;
use spada_core::agent::sync_loop::{plan_reconcile, AgentEvent, AgentState, LocalView, TaskOutput};
use spada_core::model::{canonical_json, NewAssignment, NewPayload, NewTask};
use spada_core::sim::{model_check_sync_loop, run_convergence, FaultSchedule, Workload};
use spada_core::store::{MemoryStore, StateStore};
use spada_core::{ClientId, ClientStateSnapshot, CommitBatch, DocumentId, ManualClock, TaskSummary};
use std::collections::BTreeMap;
use std::sync::Arc;

fn id(n: u8) -> DocumentId {
    DocumentId::from_bytes([n; 16])
}

fn canonical(c: &mut Criterion) {
    let value = json!({
        "readings": (0..64).map(|i| json!({"t": i, "v": i as f64 * 0.25, "tag": format!("s{i}")})).collect::<Vec<_>>(),
        "meta": {"zone": "b", "ok": true, "nested": {"a": [1, 2, 3], "b": null}},
    });
    c.bench_function("canonical_json/64_readings", |b| b.iter(|| canonical_json(black_box(&value))));
}

fn sync_loop(c: &mut Criterion) {
    let snapshot = ClientStateSnapshot {
        ts: 7,
        tasks: (0..100u8)
            .map(|i| TaskSummary { task_id: id(i), payload_id: id(200), parameters_id: None, result_count: i as u64 })
            .collect(),
    };
    let locals: BTreeMap<DocumentId, LocalView> = (50..150u8)
        .map(|i| (id(i), LocalView { running: i % 2 == 0, has_status: i % 7 == 0, next_seq: i as u64 }))
        .collect();
    c.bench_function("plan_reconcile/100_tasks", |b| b.iter(|| plan_reconcile(black_box(&snapshot), black_box(&locals))));

    c.bench_function("handle_event/output_burst", |b| {
        b.iter_batched(
            || AgentState::recovered(BTreeMap::new()).0,
            |mut state| {
                for seq in 0..32 {
                    let output = TaskOutput::Result { seq, value: json!(seq), produced_at: 0 };
                    black_box(state.handle_event(AgentEvent::TaskOutput { task_id: id(1), output }));
                }
            },
            BatchSize::SmallInput,
        )
    });
}

fn store(c: &mut Criterion) {
    c.bench_function("store/append_256_results", |b| {
        b.iter_batched(
            || {
                let store = MemoryStore::new(Arc::new(ManualClock::new(0)));
                let client = ClientId::new("edge").unwrap();
                store.register_client(&client).unwrap();
                let mut batch = CommitBatch::default();
                batch.payloads.push(NewPayload { id: id(1), name: "p".into(), body: "pass".into() });
                batch.tasks.push(NewTask {
                    id: id(2),
                    assignment_id: id(3),
                    client_id: client,
                    payload_id: id(1),
                    parameters_id: None,
                });
                batch.assignments.push(NewAssignment { id: id(3), name: "a".into(), task_ids: vec![id(2)] });
                store.commit_documents(batch).unwrap();
                store
            },
            |store| {
                for seq in 0..256 {
                    black_box(store.append_result(id(2), seq, json!({"seq": seq}), seq).unwrap());
                }
            },
            BatchSize::SmallInput,
        )
    });
}

fn verification(c: &mut Criterion) {
    let mut group = c.benchmark_group("verification");
    group.sample_size(10);
    group.bench_function("model_check/depth_6", |b| b.iter(|| model_check_sync_loop(6, false)));
    group.bench_function("convergence/random_seed_1", |b| {
        b.iter(|| {
            let w = Workload::random(1);
            run_convergence(FaultSchedule::random(1, w.clients), w)
        })
    });
    group.finish();
}

criterion_group!(benches, canonical, sync_loop, store, verification);
criterion_main!(benches);
