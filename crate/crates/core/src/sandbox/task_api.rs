//! The task-local API: newline-delimited JSON over a Unix socket in the
//! task's workdir.
//!
//! Requests are `{"id", "method", "params"}`, answers `{"id", "ok"}` or
//! `{"id", "err": {"code", "msg"}}`.

use super::{Gate, OutputSink};
use crate::clock::Clock;
use crate::model::{canonical_json, DocumentId, TreeValue};
use crate::signal::{Observation, SignalCache, SignalError};
use base64::Engine;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::io::{BufRead, BufReader, Read, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

pub const MAX_STATE_BYTES: usize = 16 * 1024 * 1024;
/// Longest single request line accepted (a base64 state blob plus framing).
const MAX_LINE_BYTES: usize = MAX_STATE_BYTES / 3 * 4 + 4096;
const MAX_TRACE: usize = 1_000_000;

pub mod code {
    pub const INVALID_ARGUMENT: &str = "invalid-argument";
    pub const TASK_CLOSED: &str = "task-closed";
    pub const NO_PARAMETERS: &str = "no-parameters";
    pub const NO_DATA: &str = "no-data";
    pub const TIMEOUT: &str = "timeout";
    pub const UNAVAILABLE: &str = "unavailable";
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskApiError {
    pub code: String,
    pub msg: String,
}

impl TaskApiError {
    fn new(code: &str, msg: impl Into<String>) -> Self {
        Self { code: code.to_owned(), msg: msg.into() }
    }
}

#[derive(Debug, Deserialize)]
struct Request {
    id: serde_json::Value,
    method: String,
    #[serde(default)]
    params: serde_json::Value,
}

#[derive(Debug, Serialize)]
pub(crate) struct Response {
    pub id: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ok: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub err: Option<TaskApiError>,
}

/// One value handed to the payload by a signal call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delivery {
    pub method: String,
    pub observation: Observation,
}

pub(crate) struct TaskApi {
    pub task_id: DocumentId,
    pub parameters: Option<TreeValue>,
    pub state_path: PathBuf,
    pub signals: Arc<SignalCache>,
    pub sink: Arc<dyn OutputSink>,
    pub clock: Arc<dyn Clock>,
    pub gate: Arc<Mutex<Gate>>,
    pub trace: Arc<Mutex<Vec<Delivery>>>,
    pub current: Arc<Mutex<Option<UnixStream>>>,
}

/// Reads the intermediate state blob, if any.
pub fn read_state(path: &Path) -> std::io::Result<Option<Vec<u8>>> {
    match std::fs::read(path) {
        Ok(b) => Ok(Some(b)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e),
    }
}

/// Atomically replaces the intermediate state blob.
pub fn write_state(path: &Path, blob: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("bin.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(blob)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    if let Some(dir) = path.parent() {
        std::fs::File::open(dir)?.sync_all()?;
    }
    Ok(())
}

impl TaskApi {
    pub fn serve(self, listener: UnixListener) {
        for conn in listener.incoming() {
            if self.gate.lock().closed {
                break;
            }
            let Ok(conn) = conn else { continue };
            if let Ok(clone) = conn.try_clone() {
                *self.current.lock() = Some(clone);
            }
            // The gate may have closed between accept and registration.
            if self.gate.lock().closed {
                break;
            }
            self.serve_connection(conn);
            *self.current.lock() = None;
        }
    }

    fn serve_connection(&self, conn: UnixStream) {
        let Ok(mut out) = conn.try_clone() else { return };
        let mut reader = BufReader::new(conn);
        let mut line = Vec::new();
        loop {
            line.clear();
            match Read::take(&mut reader, MAX_LINE_BYTES as u64 + 1).read_until(b'\n', &mut line) {
                Ok(0) | Err(_) => return,
                Ok(_) => {}
            }
            let response = if line.len() > MAX_LINE_BYTES {
                Response {
                    id: serde_json::Value::Null,
                    ok: None,
                    err: Some(TaskApiError::new(code::INVALID_ARGUMENT, "request line too long")),
                }
            } else {
                self.handle_line(&line)
            };
            let mut text = canonical_json(&response);
            text.push('\n');
            if out.write_all(text.as_bytes()).is_err() {
                return;
            }
            if line.len() > MAX_LINE_BYTES {
                return;
            }
        }
    }

    pub(crate) fn handle_line(&self, line: &[u8]) -> Response {
        let req: Request = match serde_json::from_slice(line) {
            Ok(r) => r,
            Err(e) => {
                let id = serde_json::from_slice::<serde_json::Value>(line)
                    .ok()
                    .and_then(|v| v.get("id").cloned())
                    .unwrap_or(serde_json::Value::Null);
                return Response {
                    id,
                    ok: None,
                    err: Some(TaskApiError::new(code::INVALID_ARGUMENT, format!("malformed request: {e}"))),
                };
            }
        };
        let id = req.id.clone();
        match self.dispatch(req) {
            Ok(v) => Response { id, ok: Some(v), err: None },
            Err(e) => Response { id, ok: None, err: Some(e) },
        }
    }

    fn dispatch(&self, req: Request) -> Result<serde_json::Value, TaskApiError> {
        let p = &req.params;
        let str_param = |key: &str| -> Result<String, TaskApiError> {
            p.get(key)
                .and_then(|v| v.as_str())
                .map(str::to_owned)
                .ok_or_else(|| TaskApiError::new(code::INVALID_ARGUMENT, format!("missing string param {key}")))
        };
        match req.method.as_str() {
            "publish" => {
                let value = p
                    .get("value")
                    .cloned()
                    .ok_or_else(|| TaskApiError::new(code::INVALID_ARGUMENT, "missing param value"))?;
                self.publish(value)
            }
            "get_parameters" => match &self.parameters {
                Some(v) => Ok(json!({ "value": v })),
                None => Err(TaskApiError::new(code::NO_PARAMETERS, "task has no parameters")),
            },
            "put_state" => {
                let data = str_param("data")?;
                let blob = base64::engine::general_purpose::STANDARD
                    .decode(data.as_bytes())
                    .map_err(|e| TaskApiError::new(code::INVALID_ARGUMENT, format!("data is not base64: {e}")))?;
                if blob.len() > MAX_STATE_BYTES {
                    return Err(TaskApiError::new(
                        code::INVALID_ARGUMENT,
                        format!("state of {} bytes exceeds {MAX_STATE_BYTES}", blob.len()),
                    ));
                }
                let gate = self.gate.lock();
                if gate.closed {
                    return Err(TaskApiError::new(code::TASK_CLOSED, "task is closed"));
                }
                write_state(&self.state_path, &blob)
                    .map_err(|e| TaskApiError::new(code::UNAVAILABLE, format!("state write failed: {e}")))?;
                drop(gate);
                Ok(json!({}))
            }
            "get_state" => {
                let blob = read_state(&self.state_path)
                    .map_err(|e| TaskApiError::new(code::UNAVAILABLE, format!("state read failed: {e}")))?;
                let data = blob.map(|b| base64::engine::general_purpose::STANDARD.encode(b));
                Ok(json!({ "data": data }))
            }
            "get_signal" => {
                let name = str_param("name")?;
                let obs = self.signals.get_signal(&name).map_err(signal_error)?;
                Ok(self.deliver("get_signal", obs))
            }
            "next_signal" => {
                let name = str_param("name")?;
                let timeout = match p.get("timeout_ms") {
                    None | Some(serde_json::Value::Null) => None,
                    Some(v) => Some(Duration::from_millis(v.as_u64().ok_or_else(|| {
                        TaskApiError::new(code::INVALID_ARGUMENT, "timeout_ms must be a non-negative integer")
                    })?)),
                };
                let obs = self.next_signal(&name, timeout)?;
                Ok(self.deliver("next_signal", obs))
            }
            other => Err(TaskApiError::new(code::INVALID_ARGUMENT, format!("unknown method {other:?}"))),
        }
    }

    fn publish(&self, value: TreeValue) -> Result<serde_json::Value, TaskApiError> {
        let mut gate = self.gate.lock();
        if gate.closed {
            return Err(TaskApiError::new(code::TASK_CLOSED, "task is closed"));
        }
        let seq = gate.next_seq;
        self.sink
            .result(self.task_id, seq, value, self.clock.now_ms())
            .map_err(|e| TaskApiError::new(code::UNAVAILABLE, format!("result not persisted: {e}")))?;
        gate.next_seq += 1;
        Ok(json!({ "seq": seq }))
    }

    /// Waits in short slices so a closing sandbox releases the handler.
    fn next_signal(&self, name: &str, timeout: Option<Duration>) -> Result<Observation, TaskApiError> {
        let after = self.signals.call_stamp();
        let deadline = timeout.map(|t| Instant::now() + t);
        loop {
            if self.gate.lock().closed {
                return Err(TaskApiError::new(code::TASK_CLOSED, "task is closed"));
            }
            let slice = match deadline {
                Some(d) => {
                    let left = d.saturating_duration_since(Instant::now());
                    left.min(Duration::from_millis(200))
                }
                None => Duration::from_millis(200),
            };
            match self.signals.next_after(name, after, slice) {
                Ok(obs) => return Ok(obs),
                Err(SignalError::Timeout(_)) if deadline.map_or(true, |d| Instant::now() < d) => continue,
                Err(e) => return Err(signal_error(e)),
            }
        }
    }

    fn deliver(&self, method: &str, obs: Observation) -> serde_json::Value {
        let reply = json!({ "value": obs.value, "observed_at": obs.observed_at });
        let mut trace = self.trace.lock();
        if trace.len() < MAX_TRACE {
            trace.push(Delivery { method: method.to_owned(), observation: obs });
        }
        reply
    }
}

fn signal_error(e: SignalError) -> TaskApiError {
    match e {
        SignalError::NoData(n) => TaskApiError::new(code::NO_DATA, format!("no observation of {n}")),
        SignalError::Timeout(n) => TaskApiError::new(code::TIMEOUT, format!("no fresh observation of {n}")),
    }
}
