use rand::SeedableRng;
use serde_json::{json, Value};
use spada_cli::{main_with, start_server, RunningServer, ServerConfig, EXIT_OK, EXIT_SERVER, EXIT_TIMEOUT, EXIT_USAGE};
use spada_core::agent::{Agent, AgentConfig, AgentDeps, SandboxConfig};
use spada_core::model::canonical_json;
use spada_core::sdk::{RemoteApi, UserClient, UserConfig};
use spada_core::ClientId;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

struct Env {
    dir: tempfile::TempDir,
    server: RunningServer,
    config: PathBuf,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ServerConfig {
            rpc_addr: "127.0.0.1:0".into(),
            bus_addr: "127.0.0.1:0".into(),
            http_addr: None,
            data_dir: Some(dir.path().join("store")),
            online_window_s: 30,
            user_tokens: vec!["user-token".into()],
            clients: BTreeMap::from([
                (ClientId::new("edge-1").unwrap(), "edge-1-token".into()),
                (ClientId::new("edge-2").unwrap(), "edge-2-token".into()),
            ]),
            max_payload_bytes: None,
        };
        let server = start_server(&cfg).unwrap();
        let config = dir.path().join("spada.json");
        let user = json!({
            "server_addr": server.rpc_addr().to_string(),
            "bus_addr": server.bus_addr().to_string(),
            "token": "user-token",
        });
        std::fs::write(&config, user.to_string()).unwrap();
        Env { dir, server, config }
    }

    fn agent(&self, id: &str) -> Agent {
        let cfg = AgentConfig {
            client_id: ClientId::new(id).unwrap(),
            server_addr: self.server.rpc_addr().to_string(),
            bus_addr: self.server.bus_addr().to_string(),
            token: format!("{id}-token"),
            data_dir: self.dir.path().join(id),
            sandbox: SandboxConfig::default(),
            online_window_s: 30,
            heartbeat_s: Some(1),
            signals: Vec::new(),
            retry: Default::default(),
        };
        let deps = AgentDeps::from_config(&cfg);
        Agent::start(cfg, deps).unwrap()
    }

    fn file(&self, name: &str, body: &str) -> PathBuf {
        let p = self.dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    fn run(&self, args: &[&str]) -> (i32, String, String) {
        run_with(&self.config, args)
    }
}

fn run_with(config: &Path, args: &[&str]) -> (i32, String, String) {
    let mut argv = vec!["spada".to_owned(), "--config".to_owned(), config.display().to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = main_with(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

#[test]
fn dry_run_batch_matches_the_sdk() {
    let env = Env::new();
    let payload = env.file("count.py", "import spada\nspada.publish({'n': 1})\n");
    let params = env.file("params.json", r#"{"threshold": 3, "label": "x"}"#);
    let args = [
        "submit", "--payload", payload.to_str().unwrap(), "--params", params.to_str().unwrap(),
        "--clients", "edge-1,edge-2", "--name", "nightly", "--dry-run", "--seed", "42",
    ];
    let (code, out, err) = env.run(&args);
    assert_eq!(code, EXIT_OK, "{err}");

    let cfg = UserConfig::load(&env.config).unwrap();
    let user = UserClient::with_entropy(
        Arc::new(RemoteApi::new(&cfg)),
        Box::new(rand_chacha::ChaCha8Rng::seed_from_u64(42)),
    );
    let p = user.payload("import spada\nspada.publish({'n': 1})\n".to_owned(), "count").unwrap();
    let v = user.parameters(json!({"label": "x", "threshold": 3})).unwrap();
    let t1 = user.task(&ClientId::new("edge-1").unwrap(), p, Some(v)).unwrap();
    let t2 = user.task(&ClientId::new("edge-2").unwrap(), p, Some(v)).unwrap();
    let a = user.assignment("nightly", &[t1, t2]).unwrap();
    let expected = canonical_json(&user.build_batch(a.id).unwrap());
    assert_eq!(out.trim_end(), expected);

    // The same seed gives the same bytes; nothing was committed.
    assert_eq!(env.run(&args).1, out);
    let (_, clients, _) = env.run(&["--json", "clients"]);
    let listed: Value = serde_json::from_str(&clients).unwrap();
    assert!(listed.as_array().unwrap().iter().all(|c| c["last_seen"].is_null()));
}

#[test]
fn submit_wait_and_results_round_trip() {
    let env = Env::new();
    let agent = env.agent("edge-1");
    let payload = env.file("emit.py", "import spada\nfor i in range(3):\n    spada.publish({'i': i})\n");
    let (code, out, err) = env.run(&[
        "--json", "submit", "--payload", payload.to_str().unwrap(), "--clients", "edge-1", "--name", "rt", "--wait",
        "--timeout", "60",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let report: Value = serde_json::from_str(&out).unwrap();
    let assignment = report["assignment_id"].as_str().unwrap().to_owned();
    let tasks = report["tasks"].as_object().unwrap();
    assert_eq!(tasks.len(), 1);
    let task = tasks.values().next().unwrap();
    assert_eq!(task["status"], "FINISHED");
    let values: Vec<&Value> = task["results"].as_array().unwrap().iter().map(|r| &r["value"]).collect();
    assert_eq!(values, [&json!({"i": 0}), &json!({"i": 1}), &json!({"i": 2})]);

    let (code, out, _) = env.run(&["results", &assignment]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("FINISHED on edge-1 (3 results)"), "{out}");
    assert!(out.contains("[2] {\"i\":2}"), "{out}");

    let (code, out, _) = env.run(&["--json", "results", &assignment, "--follow", "--timeout", "10"]);
    assert_eq!(code, EXIT_OK);
    let events: Vec<Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(events.len(), 4, "{out}");
    assert!(events[..3].iter().all(|e| e["kind"] == "result"), "{out}");
    assert_eq!(events[3]["status"], "FINISHED");

    let (code, out, _) = env.run(&["clients", "--online"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.starts_with("edge-1 last_seen="), "{out}");
    assert!(!out.contains("edge-2"), "{out}");
    agent.shutdown().unwrap();
}

#[test]
fn cancel_stops_a_running_task() {
    let env = Env::new();
    let agent = env.agent("edge-1");
    let payload = env.file("sleep.py", "import spada, time\nspada.publish(1)\ntime.sleep(60)\n");
    let (code, out, err) = env.run(&[
        "--json", "submit", "--payload", payload.to_str().unwrap(), "--clients", "edge-1", "--name", "long",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let report: Value = serde_json::from_str(&out).unwrap();
    let task = report["tasks"][0]["task_id"].as_str().unwrap().to_owned();
    let assignment = report["assignment_id"].as_str().unwrap().to_owned();

    let (code, _, err) = env.run(&["cancel", &task]);
    assert_eq!(code, EXIT_OK, "{err}");
    let (code, _, err) = env.run(&["cancel", &task]);
    assert_eq!(code, EXIT_SERVER, "canceling twice is refused");
    assert!(err.contains("spada:"), "{err}");
    let (_, out, _) = env.run(&["--json", "results", &assignment]);
    let snapshot: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(snapshot["tasks"][&task]["status"], "CANCELED");
    agent.shutdown().unwrap();
}

#[test]
fn waiting_on_an_absent_client_times_out() {
    let env = Env::new();
    let payload = env.file("p.py", "import spada\n");
    let (code, out, err) = env.run(&[
        "submit", "--payload", payload.to_str().unwrap(), "--clients", "edge-2", "--name", "idle", "--wait",
        "--timeout", "1",
    ]);
    assert_eq!(code, EXIT_TIMEOUT, "{out}{err}");
    assert!(out.contains("ACTIVE on edge-2 (0 results)"), "{out}");
}

#[test]
fn usage_errors_exit_with_two() {
    let env = Env::new();
    assert_eq!(env.run(&["submit", "--name", "x"]).0, EXIT_USAGE);
    assert_eq!(env.run(&["cancel", "not-an-id"]).0, EXIT_USAGE);
    assert_eq!(env.run(&["frobnicate"]).0, EXIT_USAGE);
    let missing = env.dir.path().join("nope.py");
    let (code, _, err) = env.run(&["submit", "--payload", missing.to_str().unwrap(), "--clients", "a", "--name", "x"]);
    assert_eq!(code, EXIT_USAGE, "{err}");
    let (code, _, _) = run_with(&env.dir.path().join("absent.json"), &["clients"]);
    assert_eq!(code, EXIT_USAGE);
    assert_eq!(env.run(&["--help"]).0, EXIT_OK);
}

#[test]
fn unknown_clients_and_bad_tokens_are_server_errors() {
    let env = Env::new();
    let payload = env.file("p.py", "import spada\n");
    let (code, _, err) = env.run(&["submit", "--payload", payload.to_str().unwrap(), "--clients", "ghost", "--name", "x"]);
    assert_eq!(code, EXIT_SERVER, "{err}");
    let bad = env.dir.path().join("bad.json");
    let cfg = json!({
        "server_addr": env.server.rpc_addr().to_string(),
        "bus_addr": env.server.bus_addr().to_string(),
        "token": "wrong",
    });
    std::fs::write(&bad, cfg.to_string()).unwrap();
    assert_eq!(run_with(&bad, &["clients"]).0, EXIT_SERVER);
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_spada");
    let status = std::process::Command::new(bin).arg("clients").arg("--bogus").output().unwrap();
    assert_eq!(status.status.code(), Some(EXIT_USAGE));
    let status = std::process::Command::new(bin).arg("--version").output().unwrap();
    assert_eq!(status.status.code(), Some(EXIT_OK));
    assert!(String::from_utf8_lossy(&status.stdout).starts_with("spada "));
}

#[test]
fn server_config_rejects_unknown_keys() {
    let cfg: Result<ServerConfig, _> = serde_json::from_value(json!({
        "rpc_addr": "127.0.0.1:0", "bus_addr": "127.0.0.1:0", "user_tokens": [], "clients": {}, "colour": "blue",
    }));
    assert!(cfg.is_err());
    let cfg: ServerConfig = serde_json::from_value(json!({
        "rpc_addr": "127.0.0.1:0", "bus_addr": "127.0.0.1:0", "user_tokens": ["u"], "clients": {"a": "t"},
    }))
    .unwrap();
    assert_eq!(cfg.online_window_s, 30);
    assert!(cfg.data_dir.is_none());
}
