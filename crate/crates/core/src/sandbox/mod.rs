//! Payload processes and their supervision.
//!
//! A sandbox is a child process in its own process group, running in a
//! task-private workdir with a scrubbed environment:
//!
//! ```text
//! <workdir>/payload.py   payload source
//! <workdir>/api.sock     task API socket (SPADA_TASK_API)
//! <workdir>/state.bin    intermediate state
//! <workdir>/stdout.log, stderr.log
//! <workdir>/pid
//! ```
//!
//! When the agent runs as root each sandbox also gets its own uid and a
//! 0700 workdir; otherwise isolation is advisory.

mod task_api;

pub use task_api::{code, read_state, write_state, Delivery, TaskApiError, MAX_STATE_BYTES};

use crate::clock::Clock;
use crate::model::{truncate_error_log, DocumentId, Millis, TaskStatus, TreeValue, MAX_ERROR_LOG_BYTES};
use crate::signal::SignalCache;
use parking_lot::{Condvar, Mutex};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Read, Seek, SeekFrom};
use std::os::unix::fs::PermissionsExt;
use std::os::unix::net::{UnixListener, UnixStream};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitStatus, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

pub const PAYLOAD_FILE: &str = "payload.py";
pub const STATE_FILE: &str = "state.bin";
pub const SOCKET_FILE: &str = "api.sock";
pub const STDOUT_FILE: &str = "stdout.log";
pub const STDERR_FILE: &str = "stderr.log";
const PID_FILE: &str = "pid";

/// Where a sandbox sends what its payload produces.
pub trait OutputSink: Send + Sync {
    /// Must be durable when it returns `Ok`.
    fn result(&self, task_id: DocumentId, seq: u64, value: TreeValue, produced_at: Millis) -> io::Result<()>;
    fn status(&self, task_id: DocumentId, status: TaskStatus, error_log: Option<String>);
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Finished,
    Error(String),
    Stopped,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Limits {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_seconds: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mem_bytes_advisory: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct SandboxSpec {
    pub task_id: DocumentId,
    pub payload_body: String,
    pub parameters: Option<TreeValue>,
    pub interpreter: Vec<String>,
    pub env: BTreeMap<String, String>,
    pub limits: Limits,
    pub workdir: PathBuf,
    /// Sequence number of the first result this run publishes.
    pub base_seq: u64,
    /// Run as this uid (requires root).
    pub uid: Option<u32>,
}

#[derive(Clone)]
pub struct SandboxContext {
    pub signals: Arc<SignalCache>,
    pub sink: Arc<dyn OutputSink>,
    pub clock: Arc<dyn Clock>,
}

#[derive(Debug, thiserror::Error)]
#[error("could not start sandbox: {0}")]
pub struct StartError(pub String);

pub(crate) struct Gate {
    pub next_seq: u64,
    pub closed: bool,
    pub outcome: Option<Outcome>,
}

#[derive(Default)]
struct ExitCell {
    status: Option<ExitStatus>,
    /// Outcome reported and workdir handled.
    settled: bool,
}

struct Shared {
    task_id: DocumentId,
    workdir: PathBuf,
    pid: i32,
    gate: Arc<Mutex<Gate>>,
    exit: Mutex<ExitCell>,
    exited: Condvar,
    current: Arc<Mutex<Option<UnixStream>>>,
    trace: Arc<Mutex<Vec<Delivery>>>,
}

impl Shared {
    /// Signals the process group unless the leader has been reaped.
    fn signal_group(&self, sig: i32) {
        let exit = self.exit.lock();
        if exit.status.is_none() {
            unsafe {
                libc::kill(-self.pid, sig);
            }
        }
    }

    fn wait_exit(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut exit = self.exit.lock();
        while exit.status.is_none() {
            if self.exited.wait_until(&mut exit, deadline).timed_out() {
                return exit.status.is_some();
            }
        }
        true
    }

    fn settle(&self) {
        self.exit.lock().settled = true;
        self.exited.notify_all();
    }

    fn wait_settled(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut exit = self.exit.lock();
        while !exit.settled {
            if self.exited.wait_until(&mut exit, deadline).timed_out() {
                return exit.settled;
            }
        }
        true
    }

    /// Unblocks the API thread: ends the live connection and wakes accept.
    fn release_api(&self) {
        if let Some(conn) = self.current.lock().take() {
            let _ = conn.shutdown(std::net::Shutdown::Both);
        }
        let _ = UnixStream::connect(self.workdir.join(SOCKET_FILE));
    }

    /// Claims the single terminal outcome; false if one was already set.
    fn claim(&self, outcome: Outcome) -> bool {
        let mut gate = self.gate.lock();
        if gate.outcome.is_some() {
            return false;
        }
        gate.closed = true;
        gate.outcome = Some(outcome);
        true
    }
}

pub struct Sandbox {
    shared: Arc<Shared>,
}

fn wipe(dir: &Path) {
    if let Err(e) = std::fs::remove_dir_all(dir) {
        if e.kind() != io::ErrorKind::NotFound {
            tracing::warn!(dir = %dir.display(), error = %e, "could not wipe workdir");
        }
    }
}

/// Kills a process left behind by a previous agent run, if the pid file
/// still names a live process rooted in this workdir.
fn kill_stale(workdir: &Path) {
    let Ok(text) = std::fs::read_to_string(workdir.join(PID_FILE)) else { return };
    let Ok(pid) = text.trim().parse::<i32>() else { return };
    let cwd = std::fs::read_link(format!("/proc/{pid}/cwd")).ok();
    let ours = std::fs::canonicalize(workdir).ok();
    if pid > 1 && cwd.is_some() && cwd == ours {
        tracing::warn!(pid, "killing stale payload process");
        unsafe {
            libc::kill(-pid, libc::SIGKILL);
            libc::kill(pid, libc::SIGKILL);
        }
    }
}

fn chown(path: &Path, uid: u32) -> io::Result<()> {
    std::os::unix::fs::chown(path, Some(uid), Some(uid))
}

/// Last `MAX_ERROR_LOG_BYTES` of a log file.
fn log_tail(path: &Path) -> String {
    let Ok(mut f) = std::fs::File::open(path) else { return String::new() };
    let len = f.metadata().map(|m| m.len()).unwrap_or(0);
    let start = len.saturating_sub(MAX_ERROR_LOG_BYTES as u64);
    if f.seek(SeekFrom::Start(start)).is_err() {
        return String::new();
    }
    let mut buf = Vec::new();
    let _ = f.read_to_end(&mut buf);
    String::from_utf8_lossy(&buf).into_owned()
}

fn describe(status: ExitStatus) -> String {
    match (status.code(), status.signal()) {
        (Some(c), _) => format!("exit code {c}"),
        (None, Some(s)) => format!("killed by signal {s}"),
        _ => "exited abnormally".to_owned(),
    }
}

impl Sandbox {
    pub fn start(spec: SandboxSpec, ctx: SandboxContext) -> Result<Sandbox, StartError> {
        let err = |what: &str, e: io::Error| StartError(format!("{what}: {e}"));
        let workdir = spec.workdir.clone();
        std::fs::create_dir_all(&workdir).map_err(|e| err("workdir", e))?;
        kill_stale(&workdir);
        std::fs::write(workdir.join(PAYLOAD_FILE), &spec.payload_body).map_err(|e| err("payload", e))?;
        let sock_path = workdir.join(SOCKET_FILE);
        let _ = std::fs::remove_file(&sock_path);
        let _ = std::fs::remove_file(workdir.join(PID_FILE));
        let stdout = std::fs::File::create(workdir.join(STDOUT_FILE)).map_err(|e| err("stdout log", e))?;
        let stderr = std::fs::File::create(workdir.join(STDERR_FILE)).map_err(|e| err("stderr log", e))?;
        let listener = UnixListener::bind(&sock_path).map_err(|e| err("task api socket", e))?;
        if let Some(uid) = spec.uid {
            std::fs::set_permissions(&workdir, std::fs::Permissions::from_mode(0o700)).map_err(|e| err("workdir", e))?;
            for p in [workdir.as_path(), &workdir.join(PAYLOAD_FILE), &sock_path] {
                chown(p, uid).map_err(|e| err("chown", e))?;
            }
        }

        let Some((program, args)) = spec.interpreter.split_first() else {
            return Err(StartError("empty interpreter command".into()));
        };
        let mut cmd = Command::new(program);
        cmd.args(args)
            .arg(PAYLOAD_FILE)
            .current_dir(&workdir)
            .env_clear()
            .env("PATH", std::env::var("PATH").unwrap_or_else(|_| "/usr/local/bin:/usr/bin:/bin".into()))
            .envs(&spec.env)
            .env("SPADA_TASK_API", &sock_path)
            .env("SPADA_TASK_ID", spec.task_id.to_string())
            .stdin(Stdio::null())
            .stdout(stdout)
            .stderr(stderr)
            .process_group(0);
        let mem = spec.limits.mem_bytes_advisory;
        let uid = spec.uid;
        unsafe {
            cmd.pre_exec(move || {
                if let Some(bytes) = mem {
                    let lim = libc::rlimit { rlim_cur: bytes as libc::rlim_t, rlim_max: bytes as libc::rlim_t };
                    if libc::setrlimit(libc::RLIMIT_AS, &lim) != 0 {
                        return Err(io::Error::last_os_error());
                    }
                }
                if let Some(uid) = uid {
                    if libc::setgroups(0, std::ptr::null()) != 0
                        || libc::setgid(uid as libc::gid_t) != 0
                        || libc::setuid(uid as libc::uid_t) != 0
                    {
                        return Err(io::Error::last_os_error());
                    }
                }
                Ok(())
            });
        }
        let mut child = cmd.spawn().map_err(|e| err(&format!("spawning {program}"), e))?;
        let pid = child.id() as i32;
        let _ = std::fs::write(workdir.join(PID_FILE), pid.to_string());

        let gate = Arc::new(Mutex::new(Gate { next_seq: spec.base_seq, closed: false, outcome: None }));
        let shared = Arc::new(Shared {
            task_id: spec.task_id,
            workdir: workdir.clone(),
            pid,
            gate: gate.clone(),
            exit: Mutex::new(ExitCell::default()),
            exited: Condvar::new(),
            current: Arc::new(Mutex::new(None)),
            trace: Arc::new(Mutex::new(Vec::new())),
        });

        let api = task_api::TaskApi {
            task_id: spec.task_id,
            parameters: spec.parameters.clone(),
            state_path: workdir.join(STATE_FILE),
            signals: ctx.signals.clone(),
            sink: ctx.sink.clone(),
            clock: ctx.clock.clone(),
            gate,
            trace: shared.trace.clone(),
            current: shared.current.clone(),
        };
        std::thread::Builder::new()
            .name("task-api".into())
            .spawn(move || api.serve(listener))
            .map_err(|e| err("api thread", e))?;

        if let Some(secs) = spec.limits.wall_seconds {
            let watched = shared.clone();
            std::thread::Builder::new()
                .name("sandbox-wall".into())
                .spawn(move || {
                    if !watched.wait_exit(Duration::from_secs(secs))
                        && watched.claim(Outcome::Error(format!("wall-clock limit of {secs} s exceeded")))
                    {
                        watched.signal_group(libc::SIGKILL);
                    }
                })
                .map_err(|e| err("watchdog thread", e))?;
        }

        let sup = shared.clone();
        let sink = ctx.sink;
        std::thread::Builder::new()
            .name("sandbox-supervisor".into())
            .spawn(move || supervise(&sup, &mut child, sink.as_ref()))
            .map_err(|e| err("supervisor thread", e))?;

        Ok(Sandbox { shared })
    }

    pub fn task_id(&self) -> DocumentId {
        self.shared.task_id
    }

    pub fn workdir(&self) -> &Path {
        &self.shared.workdir
    }

    pub fn pid(&self) -> i32 {
        self.shared.pid
    }

    pub fn is_running(&self) -> bool {
        self.shared.exit.lock().status.is_none()
    }

    pub fn outcome(&self) -> Option<Outcome> {
        self.shared.gate.lock().outcome.clone()
    }

    /// Sequence number the next publish would get.
    pub fn next_seq(&self) -> u64 {
        self.shared.gate.lock().next_seq
    }

    /// Blocks until the process has exited and been reaped.
    pub fn wait_exit(&self, timeout: Duration) -> bool {
        self.shared.wait_exit(timeout)
    }

    /// Blocks until the supervisor has reported the outcome and cleaned up.
    pub fn wait_settled(&self, timeout: Duration) -> bool {
        self.shared.wait_settled(timeout)
    }

    pub fn signal_trace(&self) -> Vec<Delivery> {
        self.shared.trace.lock().clone()
    }

    /// Cancel semantics: terminate, force-kill after `grace`, wipe the
    /// workdir. No status is reported. Idempotent.
    pub fn stop(&self, grace: Duration) {
        if self.shared.claim(Outcome::Stopped) {
            self.shared.release_api();
            self.shared.signal_group(libc::SIGTERM);
            if !self.shared.wait_exit(grace) {
                self.shared.signal_group(libc::SIGKILL);
                self.shared.wait_exit(Duration::from_secs(5));
            }
        }
        self.shared.wait_exit(Duration::from_secs(5));
        wipe(&self.shared.workdir);
    }

    /// Kills the process but keeps the workdir, as an agent shutdown or
    /// crash would. No status is reported.
    pub fn kill_preserving(&self) {
        if self.shared.claim(Outcome::Stopped) {
            self.shared.release_api();
            self.shared.signal_group(libc::SIGKILL);
            self.shared.wait_exit(Duration::from_secs(5));
        }
    }
}

fn supervise(shared: &Shared, child: &mut std::process::Child, sink: &dyn OutputSink) {
    // Wait without reaping so the pid stays reserved while the group is
    // cleaned up.
    unsafe {
        let mut info: libc::siginfo_t = std::mem::zeroed();
        while libc::waitid(libc::P_PID, shared.pid as libc::id_t, &mut info, libc::WEXITED | libc::WNOWAIT) != 0 {
            if io::Error::last_os_error().kind() != io::ErrorKind::Interrupted {
                break;
            }
        }
    }
    {
        let mut exit = shared.exit.lock();
        unsafe {
            libc::kill(-shared.pid, libc::SIGKILL);
        }
        let status = child.wait().unwrap_or_else(|_| ExitStatus::from_raw(255 << 8));
        exit.status = Some(status);
    }
    shared.exited.notify_all();
    let status = shared.exit.lock().status.unwrap();

    let outcome = if status.success() {
        Outcome::Finished
    } else {
        let mut log = log_tail(&shared.workdir.join(STDERR_FILE));
        if log.trim().is_empty() {
            log = log_tail(&shared.workdir.join(STDOUT_FILE));
        }
        if !log.is_empty() && !log.ends_with('\n') {
            log.push('\n');
        }
        log.push_str(&describe(status));
        Outcome::Error(log)
    };
    let claimed = shared.claim(outcome.clone());
    shared.release_api();
    let outcome = if claimed { outcome } else { shared.gate.lock().outcome.clone().unwrap() };
    match outcome {
        Outcome::Stopped => {}
        Outcome::Finished => {
            sink.status(shared.task_id, TaskStatus::Finished, None);
            wipe(&shared.workdir);
        }
        Outcome::Error(msg) => {
            // A watchdog claim carries only its reason; add the log tail.
            let msg = if claimed {
                msg
            } else {
                format!("{msg}\n{}", log_tail(&shared.workdir.join(STDERR_FILE)))
            };
            sink.status(shared.task_id, TaskStatus::Error, Some(truncate_error_log(&msg)));
            wipe(&shared.workdir);
        }
    }
    shared.settle();
}

/// Source of the `spada` module payloads import.
pub const PAYLOAD_LIB_PY: &str = include_str!("../../assets/spada.py");

/// Writes the payload module into `dir` and returns the directory to put
/// on `PYTHONPATH`.
pub fn install_payload_lib(dir: &Path) -> io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    std::fs::set_permissions(dir, std::fs::Permissions::from_mode(0o755))?;
    let file = dir.join("spada.py");
    std::fs::write(&file, PAYLOAD_LIB_PY)?;
    std::fs::set_permissions(&file, std::fs::Permissions::from_mode(0o644))?;
    Ok(dir.to_owned())
}

/// Hands out distinct uids from a range to concurrently running sandboxes.
pub struct UidPool {
    range: std::ops::Range<u32>,
    used: Mutex<BTreeSet<u32>>,
}

impl UidPool {
    pub fn new(range: std::ops::Range<u32>) -> Self {
        Self { range, used: Mutex::new(BTreeSet::new()) }
    }

    /// `None` unless the process can switch uids.
    pub fn if_privileged(range: std::ops::Range<u32>) -> Option<Self> {
        (unsafe { libc::geteuid() } == 0).then(|| Self::new(range))
    }

    pub fn acquire(&self) -> Option<u32> {
        let mut used = self.used.lock();
        let uid = self.range.clone().find(|u| !used.contains(u))?;
        used.insert(uid);
        Some(uid)
    }

    pub fn release(&self, uid: u32) {
        self.used.lock().remove(&uid);
    }
}

/// Grants search permission on `dir` to other users so per-task uids can
/// reach workdirs beneath it.
pub fn make_traversable(dir: &Path) -> io::Result<()> {
    let mode = std::fs::metadata(dir)?.permissions().mode();
    if mode & 0o001 == 0 {
        std::fs::set_permissions(dir, std::fs::Permissions::from_mode(mode | 0o011))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
