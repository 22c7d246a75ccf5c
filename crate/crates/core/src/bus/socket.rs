//! Loopback-socket variant of the bus: one canonical-JSON object per line.
//!
//! Subscribers send `{"subscribe": "<topic>"}` and then receive frames;
//! publishers send frames. A connection may do both.

use super::{
    clock_of, clock_topic, event_of, events_topic, typed, BusError, BusFrame, ClockFeed,
    ClockNotification, EventFeed, MemoryBus, Publisher, Subscription, UserEvent,
};
use crate::model::{canonical_json, ClientId, DocumentId};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::Arc;
use std::time::Duration;

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum Inbound {
    Subscribe { subscribe: String },
    Frame(BusFrame),
}

pub struct BusServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
}

impl BusServer {
    pub fn bind(addr: &str, bus: Arc<MemoryBus>) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop_flag = stop.clone();
        std::thread::Builder::new().name("bus-accept".into()).spawn(move || {
            for conn in listener.incoming() {
                if stop_flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(conn) = conn else { continue };
                let bus = bus.clone();
                let _ = std::thread::Builder::new()
                    .name("bus-conn".into())
                    .spawn(move || serve_connection(conn, bus));
            }
        })?;
        Ok(Self { addr, stop })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for BusServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
    }
}

fn serve_connection(conn: TcpStream, bus: Arc<MemoryBus>) {
    let _ = conn.set_nodelay(true);
    let Ok(write_half) = conn.try_clone() else { return };
    let closed = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel::<BusFrame>();

    let writer_closed = closed.clone();
    let writer = std::thread::spawn(move || {
        let mut out = write_half;
        loop {
            match rx.recv_timeout(Duration::from_millis(200)) {
                Ok(frame) => {
                    let mut line = canonical_json(&frame);
                    line.push('\n');
                    if out.write_all(line.as_bytes()).is_err() {
                        break;
                    }
                }
                Err(RecvTimeoutError::Timeout) if !writer_closed.load(Ordering::SeqCst) => {}
                Err(_) => break,
            }
        }
        let _ = out.shutdown(Shutdown::Both);
    });

    let reader = BufReader::new(&conn);
    for line in reader.lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Inbound>(&line) {
            Ok(Inbound::Subscribe { subscribe }) => bus.attach(&subscribe, tx.clone()),
            Ok(Inbound::Frame(frame)) => bus.publish_frame(frame),
            Err(e) => tracing::debug!(error = %e, "ignoring malformed bus line"),
        }
    }
    closed.store(true, Ordering::SeqCst);
    drop(tx);
    let _ = writer.join();
}

/// Closes the TCP stream when the subscription is dropped.
struct StreamGuard(TcpStream);

impl Drop for StreamGuard {
    fn drop(&mut self) {
        let _ = self.0.shutdown(Shutdown::Both);
    }
}

/// Client side of the loopback bus.
pub struct RemoteBus {
    addr: String,
    publish_conn: Mutex<Option<TcpStream>>,
}

impl RemoteBus {
    pub fn new(addr: impl Into<String>) -> Self {
        Self { addr: addr.into(), publish_conn: Mutex::new(None) }
    }

    fn subscribe_frames(&self, topic: &str) -> Result<(mpsc::Receiver<BusFrame>, StreamGuard), BusError> {
        let mut conn = TcpStream::connect(&self.addr).map_err(|e| BusError::Unavailable(e.to_string()))?;
        let _ = conn.set_nodelay(true);
        let mut line = canonical_json(&Inbound::Subscribe { subscribe: topic.to_owned() });
        line.push('\n');
        conn.write_all(line.as_bytes()).map_err(|e| BusError::Unavailable(e.to_string()))?;
        let read_half = conn.try_clone().map_err(|e| BusError::Unavailable(e.to_string()))?;
        let (tx, rx) = mpsc::channel();
        std::thread::Builder::new()
            .name("bus-remote-sub".into())
            .spawn(move || {
                for line in BufReader::new(read_half).lines() {
                    let Ok(line) = line else { break };
                    match serde_json::from_str::<BusFrame>(&line) {
                        Ok(frame) => {
                            if tx.send(frame).is_err() {
                                break;
                            }
                        }
                        Err(e) => tracing::debug!(error = %e, "ignoring malformed bus frame"),
                    }
                }
            })
            .map_err(|e| BusError::Unavailable(e.to_string()))?;
        Ok((rx, StreamGuard(conn)))
    }

    fn send_line(&self, frame: &BusFrame) -> Result<(), BusError> {
        let mut line = canonical_json(frame);
        line.push('\n');
        let mut conn = self.publish_conn.lock();
        // One retry on a fresh connection, then give up.
        for _ in 0..2 {
            if conn.is_none() {
                match TcpStream::connect(&self.addr) {
                    Ok(c) => {
                        let _ = c.set_nodelay(true);
                        *conn = Some(c);
                    }
                    Err(_) => continue,
                }
            }
            if let Some(c) = conn.as_mut() {
                if c.write_all(line.as_bytes()).is_ok() {
                    return Ok(());
                }
            }
            *conn = None;
        }
        Err(BusError::Unavailable(format!("could not publish to {}", self.addr)))
    }
}

impl Publisher for RemoteBus {
    fn publish_clock(&self, client: &ClientId, ts: u64) -> Result<(), BusError> {
        self.send_line(&BusFrame::Clock { topic: clock_topic(client), ts })
    }

    fn publish_user_event(&self, assignment: &DocumentId, event: UserEvent) -> Result<(), BusError> {
        self.send_line(&BusFrame::Event { topic: events_topic(assignment), event })
    }
}

impl ClockFeed for RemoteBus {
    fn subscribe_clock(&self, client: &ClientId) -> Result<Subscription<ClockNotification>, BusError> {
        let (rx, guard) = self.subscribe_frames(&clock_topic(client))?;
        Ok(typed(rx, clock_of, Some(Box::new(guard))))
    }
}

impl EventFeed for RemoteBus {
    fn subscribe_events(&self, assignment: &DocumentId) -> Result<Subscription<UserEvent>, BusError> {
        let (rx, guard) = self.subscribe_frames(&events_topic(assignment))?;
        Ok(typed(rx, event_of, Some(Box::new(guard))))
    }
}
