use super::*;
use crate::clock::SystemClock;
use serde_json::json;
use std::sync::OnceLock;

#[derive(Debug, Clone, PartialEq)]
enum Event {
    Result(DocumentId, u64, TreeValue),
    Status(DocumentId, TaskStatus, Option<String>),
}

#[derive(Default)]
struct Recorder {
    events: Mutex<Vec<Event>>,
    changed: Condvar,
    fail_results: std::sync::atomic::AtomicBool,
}

impl Recorder {
    fn wait_for(&self, n: usize, timeout: Duration) -> Vec<Event> {
        let deadline = Instant::now() + timeout;
        let mut ev = self.events.lock();
        while ev.len() < n && !self.changed.wait_until(&mut ev, deadline).timed_out() {}
        ev.clone()
    }

    fn statuses(&self) -> Vec<Event> {
        self.events.lock().iter().filter(|e| matches!(e, Event::Status(..))).cloned().collect()
    }
}

impl OutputSink for Recorder {
    fn result(&self, task_id: DocumentId, seq: u64, value: TreeValue, _: Millis) -> io::Result<()> {
        if self.fail_results.load(std::sync::atomic::Ordering::SeqCst) {
            return Err(io::Error::new(io::ErrorKind::Other, "disk full"));
        }
        self.events.lock().push(Event::Result(task_id, seq, value));
        self.changed.notify_all();
        Ok(())
    }

    fn status(&self, task_id: DocumentId, status: TaskStatus, error_log: Option<String>) {
        self.events.lock().push(Event::Status(task_id, status, error_log));
        self.changed.notify_all();
    }
}

fn lib_dir() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let d = tempfile::tempdir().unwrap();
        make_traversable(d.path()).unwrap();
        install_payload_lib(&d.path().join("lib")).unwrap();
        d
    })
    .path()
}

fn uids() -> Option<&'static UidPool> {
    static POOL: OnceLock<Option<UidPool>> = OnceLock::new();
    POOL.get_or_init(|| UidPool::if_privileged(210_000..211_000)).as_ref()
}

struct Rig {
    root: tempfile::TempDir,
    sink: Arc<Recorder>,
    signals: Arc<SignalCache>,
}

impl Rig {
    fn new() -> Self {
        let root = tempfile::tempdir().unwrap();
        make_traversable(root.path()).unwrap();
        Rig { root, sink: Arc::new(Recorder::default()), signals: Arc::new(SignalCache::new()) }
    }

    fn spec(&self, task: u8, body: &str) -> SandboxSpec {
        let mut env = BTreeMap::new();
        env.insert("PYTHONPATH".into(), lib_dir().join("lib").display().to_string());
        SandboxSpec {
            task_id: DocumentId::from_bytes([task; 16]),
            payload_body: body.into(),
            parameters: None,
            interpreter: vec!["python3".into()],
            env,
            limits: Limits::default(),
            workdir: self.root.path().join(format!("task-{task}")),
            base_seq: 0,
            uid: uids().and_then(|p| p.acquire()),
        }
    }

    fn start(&self, spec: SandboxSpec) -> Sandbox {
        Sandbox::start(spec, self.ctx()).unwrap()
    }

    fn ctx(&self) -> SandboxContext {
        SandboxContext { signals: self.signals.clone(), sink: self.sink.clone(), clock: Arc::new(SystemClock) }
    }
}

fn tid(n: u8) -> DocumentId {
    DocumentId::from_bytes([n; 16])
}

#[test]
fn noop_payload_finishes_and_wipes_workdir() {
    let rig = Rig::new();
    let sb = rig.start(rig.spec(1, "pass\n"));
    let ev = rig.sink.wait_for(1, Duration::from_secs(10));
    assert_eq!(ev, vec![Event::Status(tid(1), TaskStatus::Finished, None)]);
    assert_eq!(sb.outcome(), Some(Outcome::Finished));
    assert!(sb.wait_settled(Duration::from_secs(5)));
    assert!(!sb.workdir().exists());
}

#[test]
fn import_only_payload_makes_no_calls() {
    let rig = Rig::new();
    let sb = rig.start(rig.spec(1, "import spada\n"));
    let ev = rig.sink.wait_for(1, Duration::from_secs(10));
    assert_eq!(ev, vec![Event::Status(tid(1), TaskStatus::Finished, None)]);
    assert!(sb.signal_trace().is_empty());
}

#[test]
fn missing_interpreter_is_a_start_error() {
    let rig = Rig::new();
    let mut spec = rig.spec(1, "pass\n");
    spec.interpreter = vec!["/nonexistent/python".into()];
    let err = Sandbox::start(spec, rig.ctx()).err().expect("start must fail");
    assert!(err.0.contains("/nonexistent/python"), "{err}");
}

#[test]
fn publishes_get_consecutive_seqs_from_base() {
    let rig = Rig::new();
    let body = "import spada\nfor i in range(3):\n    assert spada.publish({'i': i}) == 5 + i\n";
    let mut spec = rig.spec(1, body);
    spec.base_seq = 5;
    let sb = rig.start(spec);
    let ev = rig.sink.wait_for(4, Duration::from_secs(10));
    let expected: Vec<Event> = (0..3)
        .map(|i| Event::Result(tid(1), 5 + i, json!({"i": i})))
        .chain([Event::Status(tid(1), TaskStatus::Finished, None)])
        .collect();
    assert_eq!(ev, expected);
    assert_eq!(sb.next_seq(), 8);
}

#[test]
fn runtime_error_reports_log_tail() {
    let rig = Rig::new();
    rig.start(rig.spec(1, "import sys\nprint('working')\nraise RuntimeError('sensor exploded')\n"));
    let ev = rig.sink.wait_for(1, Duration::from_secs(10));
    let Event::Status(_, TaskStatus::Error, Some(log)) = &ev[0] else { panic!("{ev:?}") };
    assert!(log.contains("RuntimeError: sensor exploded"), "{log}");
    assert!(log.ends_with("exit code 1"), "{log}");
}

#[test]
fn stop_force_kills_after_grace() {
    let rig = Rig::new();
    let body = "import signal, time\nsignal.signal(signal.SIGTERM, signal.SIG_IGN)\nprint('ready', flush=True)\ntime.sleep(60)\n";
    let sb = rig.start(rig.spec(1, body));
    // Let the handler install before stopping.
    let out = sb.workdir().join(STDOUT_FILE);
    let t0 = Instant::now();
    while std::fs::read_to_string(&out).unwrap_or_default().is_empty() && t0.elapsed() < Duration::from_secs(10) {
        std::thread::sleep(Duration::from_millis(10));
    }
    let t0 = Instant::now();
    sb.stop(Duration::from_secs(1));
    let took = t0.elapsed();
    assert!(took >= Duration::from_millis(900) && took <= Duration::from_millis(1500), "{took:?}");
    assert!(!sb.is_running());
    assert!(!sb.workdir().exists());
    std::thread::sleep(Duration::from_millis(100));
    assert!(rig.sink.statuses().is_empty());
    assert_eq!(sb.outcome(), Some(Outcome::Stopped));
}

#[test]
fn cooperative_payload_exits_within_grace() {
    let rig = Rig::new();
    let body = "import signal, sys, time\nsignal.signal(signal.SIGTERM, lambda *a: sys.exit(0))\nprint('ready', flush=True)\ntime.sleep(60)\n";
    let sb = rig.start(rig.spec(1, body));
    let out = sb.workdir().join(STDOUT_FILE);
    let t0 = Instant::now();
    while std::fs::read_to_string(&out).unwrap_or_default().is_empty() && t0.elapsed() < Duration::from_secs(10) {
        std::thread::sleep(Duration::from_millis(10));
    }
    let t0 = Instant::now();
    sb.stop(Duration::from_secs(3));
    assert!(t0.elapsed() < Duration::from_secs(1), "{:?}", t0.elapsed());
    std::thread::sleep(Duration::from_millis(100));
    assert!(rig.sink.statuses().is_empty());
}

#[test]
fn stopping_an_exited_sandbox_is_a_noop() {
    let rig = Rig::new();
    let sb = rig.start(rig.spec(1, "pass\n"));
    rig.sink.wait_for(1, Duration::from_secs(10));
    sb.stop(Duration::from_secs(1));
    sb.stop(Duration::from_secs(1));
    assert_eq!(sb.outcome(), Some(Outcome::Finished));
    assert_eq!(rig.sink.statuses().len(), 1);
}

#[test]
fn exactly_one_outcome_under_stop_races() {
    for i in 0..20u8 {
        let rig = Rig::new();
        let sb = rig.start(rig.spec(i, "pass\n"));
        std::thread::sleep(Duration::from_millis(i as u64 * 3));
        sb.stop(Duration::from_millis(500));
        std::thread::sleep(Duration::from_millis(50));
        let statuses = rig.sink.statuses();
        match sb.outcome() {
            Some(Outcome::Stopped) => assert!(statuses.is_empty()),
            Some(Outcome::Finished) => assert_eq!(statuses, vec![Event::Status(tid(i), TaskStatus::Finished, None)]),
            other => panic!("{other:?}"),
        }
    }
}

#[test]
fn wall_limit_turns_into_error() {
    let rig = Rig::new();
    let mut spec = rig.spec(1, "import time\ntime.sleep(30)\n");
    spec.limits.wall_seconds = Some(1);
    rig.start(spec);
    let ev = rig.sink.wait_for(1, Duration::from_secs(10));
    let Event::Status(_, TaskStatus::Error, Some(log)) = &ev[0] else { panic!("{ev:?}") };
    assert!(log.contains("wall-clock limit"), "{log}");
}

#[test]
fn parameters_and_signals_are_served() {
    let rig = Rig::new();
    rig.signals.observe("gear", json!(3));
    let body = r#"
import spada
p = spada.parameters
g = spada.get_signal("gear")
try:
    spada.get_signal("absent")
    missing = None
except spada.TaskApiError as e:
    missing = e.code
try:
    spada.next_signal("absent", timeout_ms=50)
    late = None
except spada.TaskApiError as e:
    late = e.code
spada.publish({"p": p, "g": g, "missing": missing, "late": late})
"#;
    let mut spec = rig.spec(1, body);
    spec.parameters = Some(json!({"seconds": 5}));
    let sb = rig.start(spec);
    let ev = rig.sink.wait_for(2, Duration::from_secs(10));
    assert_eq!(ev[0], Event::Result(tid(1), 0, json!({"p": {"seconds": 5}, "g": 3, "missing": "no-data", "late": "timeout"})));
    let trace = sb.signal_trace();
    assert_eq!(trace.len(), 1);
    assert_eq!(trace[0].method, "get_signal");

    let rig = Rig::new();
    rig.start(rig.spec(2, "import spada\nspada.publish(spada.parameters)\n"));
    assert_eq!(rig.sink.wait_for(1, Duration::from_secs(10))[0], Event::Result(tid(2), 0, json!(null)));
}

#[test]
fn next_signal_waits_for_fresh_values() {
    let rig = Rig::new();
    rig.signals.observe("speed", json!(1));
    let body = "import spada\nspada.publish(spada.next_signal('speed'))\n";
    let sb = rig.start(rig.spec(1, body));
    let signals = rig.signals.clone();
    let feeder = std::thread::spawn(move || {
        for v in 2..200 {
            std::thread::sleep(Duration::from_millis(20));
            signals.observe("speed", json!(v));
        }
    });
    let ev = rig.sink.wait_for(1, Duration::from_secs(10));
    let Event::Result(_, 0, v) = &ev[0] else { panic!("{ev:?}") };
    assert_ne!(v, &json!(1));
    assert_eq!(sb.signal_trace()[0].observation.value, *v);
    drop(feeder);
}

#[test]
fn intermediate_state_survives_restart() {
    let rig = Rig::new();
    let body = r#"
import spada, time
assert spada.get_state() is None
spada.put_state(b"\x00histogram\xff")
spada.publish("saved")
time.sleep(60)
"#;
    let sb = rig.start(rig.spec(1, body));
    rig.sink.wait_for(1, Duration::from_secs(10));
    sb.kill_preserving();
    assert!(sb.workdir().join(STATE_FILE).exists());
    assert_eq!(read_state(&sb.workdir().join(STATE_FILE)).unwrap().unwrap(), b"\x00histogram\xff");

    let body = "import spada\nspada.publish(list(spada.get_state()))\n";
    let mut spec = rig.spec(1, body);
    spec.base_seq = 1;
    let again = rig.start(spec);
    let ev = rig.sink.wait_for(3, Duration::from_secs(10));
    assert_eq!(ev[1], Event::Result(tid(1), 1, json!([0, 104, 105, 115, 116, 111, 103, 114, 97, 109, 255])));
    assert_eq!(ev[2], Event::Status(tid(1), TaskStatus::Finished, None));
    // Terminal status removes the state.
    assert!(again.wait_settled(Duration::from_secs(5)));
    assert!(!rig.root.path().join("task-1").exists());
}

#[test]
fn environment_is_scrubbed() {
    std::env::set_var("SPADA_TEST_HOST_SECRET", "leak");
    let rig = Rig::new();
    let body = "import os, spada\nspada.publish(sorted(os.environ))\n";
    rig.start(rig.spec(1, body));
    let ev = rig.sink.wait_for(1, Duration::from_secs(10));
    let Event::Result(_, _, v) = &ev[0] else { panic!("{ev:?}") };
    let keys: Vec<&str> = v.as_array().unwrap().iter().map(|k| k.as_str().unwrap()).collect();
    for k in &keys {
        assert!(["PATH", "PYTHONPATH", "SPADA_TASK_API", "SPADA_TASK_ID", "LC_CTYPE"].contains(k), "unexpected {k}");
    }
    assert!(keys.contains(&"SPADA_TASK_ID"));
}

#[test]
fn payloads_cannot_read_each_other() {
    if uids().is_none() {
        eprintln!("not root: uid isolation unavailable, skipping");
        return;
    }
    let rig = Rig::new();
    let victim = rig.start(rig.spec(1, "import spada, time\nspada.put_state(b'secret')\nspada.publish(1)\ntime.sleep(60)\n"));
    rig.sink.wait_for(1, Duration::from_secs(10));
    let target = victim.workdir().to_owned();
    let body = format!(
        r#"
import os, socket, spada
out = {{}}
for name in ["state.bin", "payload.py"]:
    try:
        open(os.path.join({dir:?}, name), "rb").read()
        out[name] = "read"
    except OSError as e:
        out[name] = type(e).__name__
try:
    s = socket.socket(socket.AF_UNIX)
    s.connect(os.path.join({dir:?}, "api.sock"))
    out["api"] = "connected"
except OSError as e:
    out["api"] = type(e).__name__
spada.publish(out)
"#,
        dir = target.display().to_string()
    );
    rig.start(rig.spec(2, &body));
    let ev = rig.sink.wait_for(3, Duration::from_secs(10));
    let leaked = ev.iter().find_map(|e| match e {
        Event::Result(t, _, v) if *t == tid(2) => Some(v.clone()),
        _ => None,
    });
    assert_eq!(
        leaked.unwrap(),
        json!({"state.bin": "PermissionError", "payload.py": "PermissionError", "api": "PermissionError"})
    );
    victim.stop(Duration::from_millis(200));
}

#[test]
fn failed_persist_is_reported_to_the_payload() {
    let rig = Rig::new();
    rig.sink.fail_results.store(true, std::sync::atomic::Ordering::SeqCst);
    let body = "import spada\ntry:\n    spada.publish(1)\nexcept spada.TaskApiError as e:\n    print(e.code)\n    raise SystemExit(3)\n";
    rig.start(rig.spec(1, body));
    let ev = rig.sink.wait_for(1, Duration::from_secs(10));
    let Event::Status(_, TaskStatus::Error, Some(log)) = &ev[0] else { panic!("{ev:?}") };
    assert!(log.contains("unavailable") && log.contains("exit code 3"), "{log}");
}

mod api {
    use super::super::task_api::TaskApi;
    use super::*;

    fn api(closed: bool, parameters: Option<TreeValue>) -> (TaskApi, tempfile::TempDir) {
        let dir = tempfile::tempdir().unwrap();
        let api = TaskApi {
            task_id: tid(1),
            parameters,
            state_path: dir.path().join(STATE_FILE),
            signals: Arc::new(SignalCache::new()),
            sink: Arc::new(Recorder::default()),
            clock: Arc::new(SystemClock),
            gate: Arc::new(Mutex::new(Gate { next_seq: 0, closed, outcome: None })),
            trace: Arc::new(Mutex::new(Vec::new())),
            current: Arc::new(Mutex::new(None)),
        };
        (api, dir)
    }

    fn err_code(api: &TaskApi, line: &str) -> Option<String> {
        api.handle_line(line.as_bytes()).err.map(|e| e.code)
    }

    #[test]
    fn malformed_requests_are_invalid_argument() {
        let (api, _d) = api(false, None);
        assert_eq!(err_code(&api, "{not json"), Some(code::INVALID_ARGUMENT.into()));
        assert_eq!(err_code(&api, r#"{"id":1,"method":"frobnicate"}"#), Some(code::INVALID_ARGUMENT.into()));
        assert_eq!(err_code(&api, r#"{"id":1,"method":"publish","params":{}}"#), Some(code::INVALID_ARGUMENT.into()));
        assert_eq!(err_code(&api, r#"{"id":1,"method":"put_state","params":{"data":"***"}}"#), Some(code::INVALID_ARGUMENT.into()));
        assert_eq!(err_code(&api, r#"{"id":1,"method":"next_signal","params":{"name":"x","timeout_ms":-1}}"#), Some(code::INVALID_ARGUMENT.into()));
        assert_eq!(api.handle_line(br#"{"id":"abc","method":"nope"}"#).id, json!("abc"));
    }

    #[test]
    fn closed_task_refuses_writes() {
        let (api, _d) = api(true, Some(json!(1)));
        assert_eq!(err_code(&api, r#"{"id":1,"method":"publish","params":{"value":1}}"#), Some(code::TASK_CLOSED.into()));
        assert_eq!(err_code(&api, r#"{"id":1,"method":"put_state","params":{"data":""}}"#), Some(code::TASK_CLOSED.into()));
        assert_eq!(err_code(&api, r#"{"id":1,"method":"next_signal","params":{"name":"x"}}"#), Some(code::TASK_CLOSED.into()));
        assert_eq!(err_code(&api, r#"{"id":1,"method":"get_parameters"}"#), None);
    }

    #[test]
    fn state_round_trip_and_empty_convention() {
        let (api, _d) = api(false, None);
        let empty = api.handle_line(br#"{"id":1,"method":"get_state"}"#);
        assert_eq!(empty.ok, Some(json!({"data": null})));
        assert_eq!(err_code(&api, r#"{"id":2,"method":"put_state","params":{"data":"aGk="}}"#), None);
        assert_eq!(api.handle_line(br#"{"id":3,"method":"get_state"}"#).ok, Some(json!({"data": "aGk="})));
        assert_eq!(err_code(&api, r#"{"id":4,"method":"get_parameters"}"#), Some(code::NO_PARAMETERS.into()));
    }

    #[test]
    fn oversized_state_is_rejected() {
        let (api, _d) = api(false, None);
        let blob = base64::engine::general_purpose::STANDARD.encode(vec![0u8; MAX_STATE_BYTES + 1]);
        let line = format!(r#"{{"id":1,"method":"put_state","params":{{"data":"{blob}"}}}}"#);
        assert_eq!(err_code(&api, &line), Some(code::INVALID_ARGUMENT.into()));
    }

    use base64::Engine;
}
