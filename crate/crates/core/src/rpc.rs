//! Length-prefixed JSON RPC over a stream socket.
//!
//! Every frame is a 4-byte big-endian length followed by that many bytes of
//! canonical JSON. Requests are `{"id", "method", "params", "token"}`;
//! responses are `{"id", "ok"}` or `{"id", "err": {"code", "msg"}}`.

use crate::error::ApiError;
use crate::model::canonical_json;
use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

pub const MAX_FRAME_BYTES: usize = 64 * 1024 * 1024;

pub fn write_frame(w: &mut impl Write, body: &[u8]) -> io::Result<()> {
    if body.len() > MAX_FRAME_BYTES {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "frame too large"));
    }
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(body)?;
    w.flush()
}

/// `Ok(None)` on a clean EOF at a frame boundary.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes exceeds limit")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpcRequest {
    pub id: u64,
    pub method: String,
    #[serde(default)]
    pub params: serde_json::Value,
    #[serde(default)]
    pub token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpcResponse {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ok: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub err: Option<ApiError>,
}

impl RpcResponse {
    pub fn from_result(id: u64, result: Result<serde_json::Value, ApiError>) -> Self {
        match result {
            Ok(v) => Self { id, ok: Some(v), err: None },
            Err(e) => Self { id, ok: None, err: Some(e) },
        }
    }

    pub fn into_result(self) -> Result<serde_json::Value, ApiError> {
        match (self.ok, self.err) {
            (_, Some(e)) => Err(e),
            (Some(v), None) => Ok(v),
            (None, None) => Ok(serde_json::Value::Null),
        }
    }
}

pub trait RpcHandler: Send + Sync {
    fn handle(&self, request: RpcRequest) -> RpcResponse;
}

/// Thread-per-connection RPC listener.
pub struct RpcServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
}

impl RpcServer {
    pub fn bind(addr: &str, handler: Arc<dyn RpcHandler>) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        std::thread::Builder::new().name("rpc-accept".into()).spawn(move || {
            for conn in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(conn) = conn else { continue };
                let handler = handler.clone();
                let _ = std::thread::Builder::new()
                    .name("rpc-conn".into())
                    .spawn(move || serve_connection(conn, handler));
            }
        })?;
        Ok(Self { addr, stop })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for RpcServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
    }
}

fn serve_connection(conn: TcpStream, handler: Arc<dyn RpcHandler>) {
    let _ = conn.set_nodelay(true);
    let Ok(write_half) = conn.try_clone() else { return };
    let mut reader = BufReader::new(conn);
    let mut writer = BufWriter::new(write_half);
    loop {
        let body = match read_frame(&mut reader) {
            Ok(Some(b)) => b,
            Ok(None) => break,
            Err(e) => {
                tracing::debug!(error = %e, "rpc connection closed");
                break;
            }
        };
        let response = match serde_json::from_slice::<RpcRequest>(&body) {
            Ok(req) => handler.handle(req),
            Err(e) => {
                // Salvage the id if the envelope is at least an object.
                let id = serde_json::from_slice::<serde_json::Value>(&body)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|i| i.as_u64()))
                    .unwrap_or(0);
                RpcResponse::from_result(id, Err(ApiError::invalid_argument(format!("malformed request: {e}"))))
            }
        };
        if write_frame(&mut writer, canonical_json(&response).as_bytes()).is_err() {
            break;
        }
    }
}

/// Blocking client with one lazily (re)established connection.
pub struct RpcClient {
    addr: String,
    token: String,
    timeout: Duration,
    next_id: AtomicU64,
    conn: Mutex<Option<(BufReader<TcpStream>, BufWriter<TcpStream>)>>,
}

impl RpcClient {
    pub fn new(addr: impl Into<String>, token: impl Into<String>) -> Self {
        Self {
            addr: addr.into(),
            token: token.into(),
            timeout: Duration::from_secs(10),
            next_id: AtomicU64::new(1),
            conn: Mutex::new(None),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    fn connect(&self) -> io::Result<(BufReader<TcpStream>, BufWriter<TcpStream>)> {
        let stream = TcpStream::connect(&self.addr)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(self.timeout))?;
        stream.set_write_timeout(Some(self.timeout))?;
        let w = stream.try_clone()?;
        Ok((BufReader::new(stream), BufWriter::new(w)))
    }

    /// Sends one request. Transport failures map to `unavailable` and drop
    /// the connection so the next call reconnects.
    pub fn call_raw(&self, method: &str, params: serde_json::Value) -> Result<serde_json::Value, ApiError> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let request = RpcRequest { id, method: method.to_owned(), params, token: self.token.clone() };
        let body = canonical_json(&request);
        let mut guard = self.conn.lock();
        if guard.is_none() {
            *guard = Some(self.connect().map_err(|e| ApiError::unavailable(format!("{}: {e}", self.addr)))?);
        }
        let (reader, writer) = guard.as_mut().unwrap();
        let exchange = write_frame(writer, body.as_bytes()).and_then(|_| read_frame(reader));
        let frame = match exchange {
            Ok(Some(frame)) => frame,
            Ok(None) => {
                *guard = None;
                return Err(ApiError::unavailable("server closed the connection"));
            }
            Err(e) => {
                if let Some((r, _)) = guard.take() {
                    let _ = r.get_ref().shutdown(Shutdown::Both);
                }
                return Err(ApiError::unavailable(e.to_string()));
            }
        };
        let response: RpcResponse = serde_json::from_slice(&frame)
            .map_err(|e| ApiError::unavailable(format!("malformed response: {e}")))?;
        if response.id != id {
            *guard = None;
            return Err(ApiError::unavailable("response id mismatch"));
        }
        response.into_result()
    }

    pub fn call<P: Serialize, R: DeserializeOwned>(&self, method: &str, params: &P) -> Result<R, ApiError> {
        let params = serde_json::to_value(params).map_err(|e| ApiError::invalid_argument(e.to_string()))?;
        let value = self.call_raw(method, params)?;
        serde_json::from_value(value).map_err(|e| ApiError::unavailable(format!("unexpected response shape: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor;

    proptest! {
        #[test]
        fn frames_round_trip(bodies in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..300), 0..8)) {
            let mut buf = Vec::new();
            for b in &bodies {
                write_frame(&mut buf, b).unwrap();
            }
            let mut cur = Cursor::new(buf);
            for b in &bodies {
                prop_assert_eq!(read_frame(&mut cur).unwrap().unwrap(), b.clone());
            }
            prop_assert!(read_frame(&mut cur).unwrap().is_none());
        }
    }

    #[test]
    fn frame_layout_is_big_endian_length_then_body() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"{}").unwrap();
        assert_eq!(buf, vec![0, 0, 0, 2, b'{', b'}']);
    }

    #[test]
    fn oversized_and_truncated_frames_error() {
        let mut huge = Cursor::new(vec![0xff, 0xff, 0xff, 0xff]);
        assert!(read_frame(&mut huge).is_err());
        let mut short = Cursor::new(vec![0, 0, 0, 9, b'x']);
        assert!(read_frame(&mut short).is_err());
    }

    struct Echo;
    impl RpcHandler for Echo {
        fn handle(&self, r: RpcRequest) -> RpcResponse {
            if r.method == "fail" {
                return RpcResponse::from_result(r.id, Err(ApiError::not_found("nothing")));
            }
            RpcResponse::from_result(r.id, Ok(serde_json::json!({"method": r.method, "token": r.token})))
        }
    }

    #[test]
    fn client_server_exchange() {
        let server = RpcServer::bind("127.0.0.1:0", Arc::new(Echo)).unwrap();
        let client = RpcClient::new(server.local_addr().to_string(), "tok");
        let v = client.call_raw("ping", serde_json::Value::Null).unwrap();
        assert_eq!(v["method"], "ping");
        assert_eq!(v["token"], "tok");
        let err = client.call_raw("fail", serde_json::Value::Null).unwrap_err();
        assert_eq!(err.code, crate::error::ErrorCode::NotFound);
    }

    #[test]
    fn unreachable_server_is_unavailable() {
        let client = RpcClient::new("127.0.0.1:1", "t");
        let err = client.call_raw("x", serde_json::Value::Null).unwrap_err();
        assert!(err.is_retryable());
    }
}
