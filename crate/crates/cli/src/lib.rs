//! The `spada` command line: run a server or an agent, submit and follow
//! tasks, and run the latency bench.

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use spada_core::agent::config::{config_path, load_json, ConfigError};
use spada_core::agent::{Agent, AgentConfig, AgentDeps, AgentError};
use spada_core::bus::{BusServer, MemoryBus, UserEvent};
use spada_core::model::canonical_json;
use spada_core::rpc::RpcServer;
use spada_core::sdk::{UserClient, UserConfig};
use spada_core::server::http::HttpServer;
use spada_core::server::{Authenticator, ServerNode};
use spada_core::sim::latency::{run_latency_bench, BenchError, BenchOptions, Deployment};
use spada_core::store::{FileStore, FileStoreOptions, MemoryStore, StateStore};
use spada_core::{ApiError, ClientId, DocumentId, SystemClock, TaskStatus};
use std::collections::BTreeMap;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_SERVER: i32 = 3;
pub const EXIT_TIMEOUT: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "spada", version, about = "Edge task orchestration")]
pub struct Cli {
    /// Configuration file; defaults to $SPADA_CONFIG, then a per-command path.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a server node with its bus and HTTP endpoints.
    Serve,
    /// Run a client agent.
    Agent,
    /// Commit one task per client running a payload.
    Submit(SubmitArgs),
    /// List known clients.
    Clients {
        #[arg(long)]
        online: bool,
    },
    /// Cancel an active task.
    Cancel { task_id: DocumentId },
    /// Show an assignment's tasks and results.
    Results {
        assignment_id: DocumentId,
        /// Stream events until every task has ended.
        #[arg(long)]
        follow: bool,
        /// Seconds to follow before giving up.
        #[arg(long)]
        timeout: Option<u64>,
    },
    /// Measure task latency on a local deployment.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SubmitArgs {
    #[arg(long)]
    pub payload: PathBuf,
    /// JSON parameters file.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Comma-separated client ids.
    #[arg(long, value_delimiter = ',', required = true)]
    pub clients: Vec<ClientId>,
    #[arg(long)]
    pub name: String,
    /// Wait for every task to end and print the results.
    #[arg(long)]
    pub wait: bool,
    /// Seconds to wait with --wait.
    #[arg(long, default_value_t = 600)]
    pub timeout: u64,
    /// Print the commit batch instead of sending it.
    #[arg(long)]
    pub dry_run: bool,
    /// Seed document ids, for reproducible batches.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BenchDeployment {
    Loopback,
    InProcess,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(short, long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, value_enum, default_value = "loopback")]
    pub deployment: BenchDeployment,
    /// Interpreter command for payloads.
    #[arg(long, default_value = "python3")]
    pub python: String,
}

fn default_online_window() -> u64 {
    30
}

/// `spada serve` configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    pub rpc_addr: String,
    pub bus_addr: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub http_addr: Option<String>,
    /// Store directory; the store lives in memory when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    #[serde(default = "default_online_window")]
    pub online_window_s: u64,
    pub user_tokens: Vec<String>,
    /// Client id to token.
    pub clients: BTreeMap<ClientId, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_payload_bytes: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Server(String),
    #[error("{0}")]
    Timeout(String),
    #[error("output: {0}")]
    Io(#[from] std::io::Error),
}

impl From<ApiError> for CliError {
    fn from(e: ApiError) -> Self {
        CliError::Server(e.to_string())
    }
}

impl From<AgentError> for CliError {
    fn from(e: AgentError) -> Self {
        CliError::Server(e.to_string())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_USAGE,
            CliError::Server(_) | CliError::Io(_) => EXIT_SERVER,
            CliError::Timeout(_) => EXIT_TIMEOUT,
        }
    }
}

/// A server node and its listeners; dropping it stops them.
pub struct RunningServer {
    pub node: ServerNode,
    pub rpc: RpcServer,
    pub bus: BusServer,
    pub http: Option<HttpServer>,
}

impl RunningServer {
    pub fn rpc_addr(&self) -> SocketAddr {
        self.rpc.local_addr()
    }

    pub fn bus_addr(&self) -> SocketAddr {
        self.bus.local_addr()
    }
}

pub fn start_server(cfg: &ServerConfig) -> Result<RunningServer, CliError> {
    let clock = Arc::new(SystemClock);
    let window = cfg.online_window_s * 1000;
    let store: Arc<dyn StateStore> = match &cfg.data_dir {
        Some(dir) => Arc::new(
            FileStore::open(dir, clock, FileStoreOptions::default())
                .map_err(|e| CliError::Server(format!("opening store {}: {e}", dir.display())))?
                .with_online_window_ms(window),
        ),
        None => Arc::new(MemoryStore::new(clock).with_online_window_ms(window)),
    };
    let mut auth = Authenticator::new();
    for t in &cfg.user_tokens {
        auth = auth.with_user(t);
    }
    for (client, token) in &cfg.clients {
        auth = auth.with_client(client.clone(), token);
    }
    let bus = Arc::new(MemoryBus::new());
    let mut node = ServerNode::new(store, bus.clone(), auth)?;
    if let Some(cap) = cfg.max_payload_bytes {
        node = node.with_max_payload_bytes(cap);
    }
    let listen = |what: &str, addr: &str, e: std::io::Error| CliError::Server(format!("{what} listener on {addr}: {e}"));
    let rpc = RpcServer::bind(&cfg.rpc_addr, Arc::new(node.clone())).map_err(|e| listen("rpc", &cfg.rpc_addr, e))?;
    let bus_server = BusServer::bind(&cfg.bus_addr, bus.clone()).map_err(|e| listen("bus", &cfg.bus_addr, e))?;
    let http = match &cfg.http_addr {
        Some(addr) => Some(HttpServer::bind(addr, node.clone(), bus).map_err(|e| listen("http", addr, e))?),
        None => None,
    };
    Ok(RunningServer { node, rpc, bus: bus_server, http })
}

fn user_config(path: Option<&Path>) -> Result<UserConfig, CliError> {
    let path = path.map(Path::to_owned).unwrap_or_else(|| config_path(Path::new("spada.json")));
    Ok(UserConfig::load(&path)?)
}

fn user_client(cfg: &UserConfig, seed: Option<u64>) -> UserClient {
    let api = Arc::new(spada_core::sdk::RemoteApi::new(cfg));
    match seed {
        Some(s) => UserClient::with_entropy(api, Box::new(rand_chacha::ChaCha8Rng::seed_from_u64(s))),
        None => UserClient::new(api),
    }
}

/// Drafts the documents `spada submit` commits. Shared with tests so both
/// surfaces build the same batch.
pub fn draft_submission(
    user: &UserClient,
    payload_body: String,
    payload_name: &str,
    params: Option<serde_json::Value>,
    clients: &[ClientId],
    name: &str,
) -> Result<DocumentId, ApiError> {
    let payload = user.payload(payload_body, payload_name)?;
    let params = params.map(|v| user.parameters(v)).transpose()?;
    let tasks = clients.iter().map(|c| user.task(c, payload, params)).collect::<Result<Vec<_>, _>>()?;
    Ok(user.assignment(name, &tasks)?.id)
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("reading {}: {e}", path.display())))
}

fn submit(cli: &Cli, args: &SubmitArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let body = read_file(&args.payload)?;
    let params = match &args.params {
        Some(p) => Some(
            serde_json::from_str::<serde_json::Value>(&read_file(p)?)
                .map_err(|e| CliError::Usage(format!("parameters {}: {e}", p.display())))?,
        ),
        None => None,
    };
    let cfg = if args.dry_run {
        user_config(cli.config.as_deref()).unwrap_or(UserConfig {
            server_addr: String::new(),
            bus_addr: String::new(),
            token: String::new(),
        })
    } else {
        user_config(cli.config.as_deref())?
    };
    let user = user_client(&cfg, args.seed);
    let payload_name = args.payload.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let assignment = draft_submission(&user, body, &payload_name, params, &args.clients, &args.name)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    if args.dry_run {
        writeln!(out, "{}", canonical_json(&user.build_batch(assignment)?))?;
        return Ok(());
    }
    user.commit(assignment)?;
    let tasks = user.tasks_of(assignment)?;
    if cli.json && !args.wait {
        let tasks: Vec<_> = tasks.iter().map(|t| json!({"task_id": t.id, "client_id": t.client_id})).collect();
        writeln!(out, "{}", canonical_json(&json!({"assignment_id": assignment, "tasks": tasks})))?;
    } else if !cli.json {
        writeln!(out, "assignment {assignment}")?;
        for t in &tasks {
            writeln!(out, "  task {} on {}", t.id, t.client_id)?;
        }
    }
    if args.wait {
        let outcome = user.await_results(assignment, Duration::from_secs(args.timeout))?;
        print_outcome(cli.json, assignment, &outcome.tasks, out)?;
        if outcome.timed_out {
            return Err(CliError::Timeout(format!("assignment {assignment} still running")));
        }
    }
    Ok(())
}

fn print_outcome(
    as_json: bool,
    assignment: DocumentId,
    tasks: &BTreeMap<DocumentId, spada_core::sdk::TaskOutcome>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    if as_json {
        writeln!(out, "{}", canonical_json(&json!({"assignment_id": assignment, "tasks": tasks})))?;
        return Ok(());
    }
    for (id, t) in tasks {
        writeln!(out, "{id} {} on {} ({} results)", t.status, t.client_id, t.results.len())?;
        for r in &t.results {
            writeln!(out, "  [{}] {}", r.seq, canonical_json(&r.value))?;
        }
        if let Some(log) = &t.error_log {
            for line in log.lines() {
                writeln!(out, "  | {line}")?;
            }
        }
    }
    Ok(())
}

fn event_line(as_json: bool, ev: &UserEvent) -> String {
    if as_json {
        return canonical_json(ev);
    }
    match ev {
        UserEvent::Result { task_id, seq, value } => format!("{task_id} result {seq} {}", canonical_json(value)),
        UserEvent::Status { task_id, status } => format!("{task_id} {status}"),
    }
}

fn results(
    cli: &Cli,
    assignment: DocumentId,
    follow: bool,
    timeout: Option<u64>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let user = user_client(&user_config(cli.config.as_deref())?, None);
    if !follow {
        return print_outcome(cli.json, assignment, &user.snapshot(assignment)?, out);
    }
    let deadline = timeout.map(|s| std::time::Instant::now() + Duration::from_secs(s));
    let mut stream = user.stream(assignment);
    loop {
        let wait = match deadline {
            Some(d) => d.saturating_duration_since(std::time::Instant::now()),
            None => Duration::from_secs(3600),
        };
        match stream.next_timeout(wait)? {
            Some(ev) => {
                writeln!(out, "{}", event_line(cli.json, &ev))?;
                out.flush()?;
            }
            None if stream.is_complete() => return Ok(()),
            None if deadline.is_some_and(|d| std::time::Instant::now() >= d) => {
                return Err(CliError::Timeout(format!("assignment {assignment} still running")));
            }
            None => {}
        }
    }
}

fn clients(cli: &Cli, online: bool, out: &mut dyn Write) -> Result<(), CliError> {
    let user = user_client(&user_config(cli.config.as_deref())?, None);
    let list = user.list_clients(online)?;
    if cli.json {
        writeln!(out, "{}", canonical_json(&list))?;
    } else {
        for c in list {
            let seen = c.last_seen.map_or("never".to_owned(), |t| t.to_string());
            writeln!(out, "{} last_seen={seen}", c.client_id)?;
        }
    }
    Ok(())
}

fn cancel(cli: &Cli, task: DocumentId, out: &mut dyn Write) -> Result<(), CliError> {
    let user = user_client(&user_config(cli.config.as_deref())?, None);
    user.cancel(task)?;
    if cli.json {
        writeln!(out, "{}", canonical_json(&json!({"task_id": task, "status": TaskStatus::Canceled})))?;
    } else {
        writeln!(out, "canceled {task}")?;
    }
    Ok(())
}

fn bench(cli: &Cli, args: &BenchArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if args.n == 0 {
        return Err(CliError::Usage("-n must be at least 1".into()));
    }
    let deployment = match args.deployment {
        BenchDeployment::Loopback => Deployment::Loopback,
        BenchDeployment::InProcess => Deployment::InProcess,
    };
    let python_cmd = args.python.split_whitespace().map(str::to_owned).collect();
    let opts = BenchOptions { python_cmd, ..Default::default() };
    let report = run_latency_bench(args.n, deployment, &opts).map_err(|e| match e {
        BenchError::Timeout(m) => CliError::Timeout(m),
        other => CliError::Server(other.to_string()),
    })?;
    if cli.json {
        writeln!(out, "{}", canonical_json(&report))?;
    } else {
        write!(out, "{}", report.render_table())?;
    }
    Ok(())
}

/// Blocks until SIGINT or SIGTERM.
fn wait_for_signal() -> Result<(), CliError> {
    let (tx, rx) = std::sync::mpsc::channel();
    ctrlc::set_handler(move || {
        let _ = tx.send(());
    })
    .map_err(|e| CliError::Server(format!("signal handler: {e}")))?;
    let _ = rx.recv();
    Ok(())
}

fn serve(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let path = cli.config.clone().unwrap_or_else(|| config_path(Path::new("server.json")));
    let cfg: ServerConfig = load_json(&path)?;
    let server = start_server(&cfg)?;
    writeln!(out, "rpc {} bus {}", server.rpc_addr(), server.bus_addr())?;
    if let Some(h) = &server.http {
        writeln!(out, "http {}", h.local_addr())?;
    }
    out.flush()?;
    wait_for_signal()
}

fn agent(cli: &Cli) -> Result<(), CliError> {
    let path = cli.config.clone().unwrap_or_else(|| config_path(Path::new("/etc/spada/agent.json")));
    let cfg = AgentConfig::load(&path)?;
    let deps = AgentDeps::from_config(&cfg);
    let agent = Agent::start(cfg, deps)?;
    let stop = agent.stop_handle();
    ctrlc::set_handler(move || stop.stop()).map_err(|e| CliError::Server(format!("signal handler: {e}")))?;
    Ok(agent.wait()?)
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Serve => serve(cli, out),
        Command::Agent => agent(cli),
        Command::Submit(args) => submit(cli, args, out),
        Command::Clients { online } => clients(cli, *online, out),
        Command::Cancel { task_id } => cancel(cli, *task_id, out),
        Command::Results { assignment_id, follow, timeout } => results(cli, *assignment_id, *follow, *timeout, out),
        Command::Bench(args) => bench(cli, args, out),
    }
}

/// Parses `args`, runs the command and returns the exit code.
pub fn main_with(args: impl IntoIterator<Item = String>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() { write!(err, "{e}") } else { write!(out, "{e}") };
            return code;
        }
    };
    match run(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "spada: {e}");
            e.exit_code()
        }
    }
}
