//! Browser-facing HTTP mapping of the user API.
//!
//! | route                         | body / query           | reply            |
//! |-------------------------------|------------------------|------------------|
//! | `POST /v1/commit`             | `CommitBatch`          | `{"ids": [...]}` |
//! | `POST /v1/tasks/{id}/cancel`  |                        | `{}`             |
//! | `GET /v1/query?kind=..`       | `QueryFilter` fields   | `QueryResult`    |
//! | `GET /v1/stream?assignment=`  |                        | SSE of events    |
//!
//! The token travels as `Authorization: Bearer <token>`, or as `?token=` for
//! event streams opened from a browser. Errors are `{"code", "msg"}`.

use super::ServerNode;
use crate::bus::{EventFeed, Subscription, UserEvent};
use crate::error::{ApiError, ErrorCode};
use crate::model::{canonical_json, ClientId, DocumentId};
use crate::store::{QueryFilter, QueryKind};
use std::io::{self, Write};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::RecvTimeoutError;
use std::sync::Arc;
use std::time::Duration;
use tiny_http::{Header, Method, Request, Response, Server};

const KEEPALIVE: Duration = Duration::from_secs(15);

pub struct HttpServer {
    addr: SocketAddr,
    server: Arc<Server>,
    stop: Arc<AtomicBool>,
}

impl HttpServer {
    pub fn bind(addr: &str, node: ServerNode, events: Arc<dyn EventFeed>) -> io::Result<Self> {
        let server = Arc::new(Server::http(addr).map_err(|e| io::Error::new(io::ErrorKind::Other, e.to_string()))?);
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| io::Error::new(io::ErrorKind::Other, "not an IP listener"))?;
        let stop = Arc::new(AtomicBool::new(false));
        let (srv, flag) = (server.clone(), stop.clone());
        std::thread::Builder::new().name("http-accept".into()).spawn(move || {
            for request in srv.incoming_requests() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let (node, events) = (node.clone(), events.clone());
                let _ = std::thread::Builder::new()
                    .name("http-req".into())
                    .spawn(move || route(request, &node, events.as_ref()));
            }
        })?;
        Ok(Self { addr, server, stop })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for HttpServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.server.unblock();
    }
}

fn status_for(code: ErrorCode) -> u16 {
    match code {
        ErrorCode::Unauthenticated => 401,
        ErrorCode::NotFound => 404,
        ErrorCode::InvalidArgument => 400,
        ErrorCode::FailedPrecondition => 409,
        ErrorCode::Unavailable => 503,
    }
}

fn json_header() -> Header {
    Header::from_bytes("Content-Type", "application/json").unwrap()
}

fn reply_json(request: Request, status: u16, body: String) {
    let response = Response::from_string(body).with_status_code(status).with_header(json_header());
    let _ = request.respond(response);
}

fn reply(request: Request, result: Result<serde_json::Value, ApiError>) {
    match result {
        Ok(v) => reply_json(request, 200, canonical_json(&v)),
        Err(e) => reply_json(request, status_for(e.code), canonical_json(&e)),
    }
}

fn query_pairs(url: &str) -> Vec<(String, String)> {
    let Some((_, q)) = url.split_once('?') else { return Vec::new() };
    q.split('&')
        .filter(|p| !p.is_empty())
        .map(|p| {
            let (k, v) = p.split_once('=').unwrap_or((p, ""));
            (percent_decode(k), percent_decode(v))
        })
        .collect()
}

fn percent_decode(s: &str) -> String {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'+' => out.push(b' '),
            b'%' if i + 2 < bytes.len() => {
                let hex = std::str::from_utf8(&bytes[i + 1..i + 3]).ok();
                match hex.and_then(|h| u8::from_str_radix(h, 16).ok()) {
                    Some(b) => {
                        out.push(b);
                        i += 2;
                    }
                    None => out.push(b'%'),
                }
            }
            b => out.push(b),
        }
        i += 1;
    }
    String::from_utf8_lossy(&out).into_owned()
}

fn token_of(request: &Request, pairs: &[(String, String)]) -> String {
    let bearer = request
        .headers()
        .iter()
        .find(|h| h.field.equiv("Authorization"))
        .and_then(|h| h.value.as_str().strip_prefix("Bearer ").map(str::to_owned));
    bearer
        .or_else(|| pairs.iter().find(|(k, _)| k == "token").map(|(_, v)| v.clone()))
        .unwrap_or_default()
}

fn parse_id(s: &str) -> Result<DocumentId, ApiError> {
    s.parse().map_err(|_| ApiError::invalid_argument(format!("malformed id {s:?}")))
}

/// Builds a filter from query-string pairs; unknown keys are rejected.
pub fn filter_from_pairs(pairs: &[(String, String)]) -> Result<QueryFilter, ApiError> {
    let mut f = QueryFilter::default();
    let bad = |k: &str, v: &str| ApiError::invalid_argument(format!("bad value {v:?} for {k}"));
    for (k, v) in pairs {
        match k.as_str() {
            "token" => {}
            "kind" => {
                f.kind = match v.as_str() {
                    "tasks" => QueryKind::Tasks,
                    "results" => QueryKind::Results,
                    "clients" => QueryKind::Clients,
                    "assignments" => QueryKind::Assignments,
                    _ => return Err(bad(k, v)),
                }
            }
            "assignment" => f.assignment = Some(parse_id(v)?),
            "task" => f.task = Some(parse_id(v)?),
            "client" => f.client = Some(ClientId::new(v.clone()).map_err(|_| bad(k, v))?),
            "status" => f.status = Some(v.parse().map_err(|_| bad(k, v))?),
            "since" => f.since = Some(v.parse().map_err(|_| bad(k, v))?),
            "until" => f.until = Some(v.parse().map_err(|_| bad(k, v))?),
            "online_only" => f.online_only = v.parse().map_err(|_| bad(k, v))?,
            _ => return Err(ApiError::invalid_argument(format!("unknown query key {k:?}"))),
        }
    }
    Ok(f)
}

fn route(mut request: Request, node: &ServerNode, events: &dyn EventFeed) {
    let url = request.url().to_owned();
    let path = url.split('?').next().unwrap_or("").to_owned();
    let pairs = query_pairs(&url);
    let token = token_of(&request, &pairs);
    let segments: Vec<&str> = path.trim_matches('/').split('/').collect();

    match (request.method().clone(), segments.as_slice()) {
        (Method::Post, ["v1", "commit"]) => {
            let mut body = String::new();
            if let Err(e) = request.as_reader().read_to_string(&mut body) {
                return reply(request, Err(ApiError::invalid_argument(e.to_string())));
            }
            let result = node.principal(&token).and_then(|_| {
                let batch = serde_json::from_str(&body)
                    .map_err(|e| ApiError::invalid_argument(format!("bad commit batch: {e}")))?;
                node.commit(&token, batch).map(|r| serde_json::to_value(r).unwrap())
            });
            reply(request, result)
        }
        (Method::Post, ["v1", "tasks", id, "cancel"]) => {
            let result = node
                .principal(&token)
                .and_then(|_| parse_id(id))
                .and_then(|id| node.cancel(&token, id))
                .map(|_| serde_json::json!({}));
            reply(request, result)
        }
        (Method::Get, ["v1", "query"]) => {
            let result = node
                .principal(&token)
                .and_then(|_| filter_from_pairs(&pairs))
                .and_then(|f| node.query(&token, &f))
                .map(|r| serde_json::to_value(r).unwrap());
            reply(request, result)
        }
        (Method::Get, ["v1", "stream"]) => {
            if let Err(e) = node.require_user(&token) {
                return reply(request, Err(e));
            }
            let assignment = match pairs.iter().find(|(k, _)| k == "assignment") {
                Some((_, v)) => match parse_id(v) {
                    Ok(id) => id,
                    Err(e) => return reply(request, Err(e)),
                },
                None => return reply(request, Err(ApiError::invalid_argument("assignment is required"))),
            };
            let sub = match events.subscribe_events(&assignment) {
                Ok(s) => s,
                Err(e) => return reply(request, Err(ApiError::unavailable(e.to_string()))),
            };
            // Blocks until the browser goes away.
            let _ = stream_events(request.into_writer(), sub);
        }
        _ => reply_json(
            request,
            404,
            canonical_json(&ApiError::not_found(format!("no route for {path}"))),
        ),
    }
}

pub fn sse_frame(event: &UserEvent) -> String {
    format!("data: {}\n\n", canonical_json(event))
}

/// Writes the reply head and then one frame per event, flushing each so
/// small events are not held back. A comment line goes out periodically so
/// a vanished browser is noticed on the next write.
fn stream_events(mut out: Box<dyn Write + Send>, sub: Subscription<UserEvent>) -> io::Result<()> {
    out.write_all(
        b"HTTP/1.1 200 OK\r\nContent-Type: text/event-stream\r\nCache-Control: no-cache\r\nConnection: close\r\n\r\n",
    )?;
    out.flush()?;
    loop {
        let frame = match sub.recv_timeout(KEEPALIVE) {
            Ok(ev) => sse_frame(&ev),
            Err(RecvTimeoutError::Timeout) => ": keepalive\n\n".to_owned(),
            Err(RecvTimeoutError::Disconnected) => return Ok(()),
        };
        out.write_all(frame.as_bytes())?;
        out.flush()?;
    }
}
