//! Notification bus.
//!
//! Clock topics (`clients/<id>/clock`) carry nothing but the client's
//! current logical clock and retain the latest value for late subscribers.
//! Event topics (`assignments/<id>/events`) fan result and status events out
//! to users and retain nothing. Delivery is at-most-once: a subscriber may
//! miss values, and the sync loop copes by comparing clocks.

mod socket;

pub use socket::{BusServer, RemoteBus};

use crate::model::{ClientId, DocumentId, TaskStatus, TreeValue};
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

pub fn clock_topic(client: &ClientId) -> String {
    format!("clients/{client}/clock")
}

pub fn events_topic(assignment: &DocumentId) -> String {
    format!("assignments/{assignment}/events")
}

fn client_of_topic(topic: &str) -> Option<ClientId> {
    let id = topic.strip_prefix("clients/")?.strip_suffix("/clock")?;
    ClientId::new(id).ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClockNotification {
    pub ts: u64,
}

/// What users see on an assignment's event topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UserEvent {
    Result {
        task_id: DocumentId,
        seq: u64,
        value: TreeValue,
    },
    Status {
        task_id: DocumentId,
        status: TaskStatus,
    },
}

impl UserEvent {
    pub fn task_id(&self) -> DocumentId {
        match self {
            UserEvent::Result { task_id, .. } | UserEvent::Status { task_id, .. } => *task_id,
        }
    }
}

/// One line on the loopback wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BusFrame {
    Clock { topic: String, ts: u64 },
    Event { topic: String, event: UserEvent },
}

impl BusFrame {
    pub fn topic(&self) -> &str {
        match self {
            BusFrame::Clock { topic, .. } | BusFrame::Event { topic, .. } => topic,
        }
    }
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum BusError {
    #[error("bus unavailable: {0}")]
    Unavailable(String),
}

pub trait Publisher: Send + Sync {
    fn publish_clock(&self, client: &ClientId, ts: u64) -> Result<(), BusError>;
    fn publish_user_event(&self, assignment: &DocumentId, event: UserEvent) -> Result<(), BusError>;
}

pub trait ClockFeed: Send + Sync {
    fn subscribe_clock(&self, client: &ClientId) -> Result<Subscription<ClockNotification>, BusError>;
}

pub trait EventFeed: Send + Sync {
    fn subscribe_events(&self, assignment: &DocumentId) -> Result<Subscription<UserEvent>, BusError>;
}

/// A single-consumer stream. It ends (yields `None`) when the bus side
/// disconnects; the caller then resubscribes.
pub struct Subscription<T> {
    rx: Receiver<T>,
    _guard: Option<Box<dyn Send>>,
}

impl<T> Subscription<T> {
    pub(crate) fn new(rx: Receiver<T>, guard: Option<Box<dyn Send>>) -> Self {
        Self { rx, _guard: guard }
    }

    /// Blocks; `None` once disconnected.
    pub fn recv(&self) -> Option<T> {
        self.rx.recv().ok()
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Result<T, RecvTimeoutError> {
        self.rx.recv_timeout(timeout)
    }

    pub fn try_recv(&self) -> Option<T> {
        self.rx.try_recv().ok()
    }
}

impl<T> Iterator for Subscription<T> {
    type Item = T;
    fn next(&mut self) -> Option<T> {
        self.recv()
    }
}

#[derive(Default)]
struct ClockTopicState {
    retained: Option<u64>,
    subs: Vec<Sender<BusFrame>>,
}

#[derive(Default)]
struct BusInner {
    clocks: HashMap<String, ClockTopicState>,
    events: HashMap<String, Vec<Sender<BusFrame>>>,
}

struct Loss {
    p: f64,
    rng: ChaCha8Rng,
}

/// The reference in-process bus.
#[derive(Default)]
pub struct MemoryBus {
    inner: Mutex<BusInner>,
    loss: Mutex<Option<Loss>>,
    capture: Mutex<Option<Vec<BusFrame>>>,
}

impl MemoryBus {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drop each live delivery with probability `p` (seeded). Retained
    /// values handed out at subscribe time are unaffected.
    pub fn set_loss(&self, p: f64, seed: u64) {
        *self.loss.lock() = (p > 0.0).then(|| Loss { p, rng: ChaCha8Rng::seed_from_u64(seed) });
    }

    /// Start recording every published frame.
    pub fn start_capture(&self) {
        *self.capture.lock() = Some(Vec::new());
    }

    pub fn captured(&self) -> Vec<BusFrame> {
        self.capture.lock().clone().unwrap_or_default()
    }

    pub fn retained_clock(&self, client: &ClientId) -> Option<u64> {
        self.inner.lock().clocks.get(&clock_topic(client)).and_then(|t| t.retained)
    }

    /// Ends every stream subscribed to this client's clock topic.
    pub fn disconnect_clock(&self, client: &ClientId) {
        if let Some(t) = self.inner.lock().clocks.get_mut(&clock_topic(client)) {
            t.subs.clear();
        }
    }

    fn dropped(&self) -> bool {
        match &mut *self.loss.lock() {
            Some(loss) => loss.rng.gen_bool(loss.p.min(1.0)),
            None => false,
        }
    }

    fn record(&self, frame: &BusFrame) {
        if let Some(frames) = &mut *self.capture.lock() {
            frames.push(frame.clone());
        }
    }

    fn fanout(&self, subs: &mut Vec<Sender<BusFrame>>, frame: &BusFrame) {
        subs.retain(|tx| self.dropped() || tx.send(frame.clone()).is_ok());
    }

    /// Subscribe a raw frame sink to any topic. Clock topics deliver their
    /// retained value immediately.
    pub fn attach(&self, topic: &str, sink: Sender<BusFrame>) {
        let mut inner = self.inner.lock();
        if topic.starts_with("clients/") {
            let t = inner.clocks.entry(topic.to_owned()).or_default();
            if let Some(ts) = t.retained {
                if sink.send(BusFrame::Clock { topic: topic.to_owned(), ts }).is_err() {
                    return;
                }
            }
            t.subs.push(sink);
        } else {
            inner.events.entry(topic.to_owned()).or_default().push(sink);
        }
    }

    /// Publish an already-framed message (used by the socket server).
    pub fn publish_frame(&self, frame: BusFrame) {
        self.record(&frame);
        let mut inner = self.inner.lock();
        match &frame {
            BusFrame::Clock { topic, ts } => {
                let t = inner.clocks.entry(topic.clone()).or_default();
                t.retained = Some(t.retained.map_or(*ts, |r| r.max(*ts)));
                let mut subs = std::mem::take(&mut t.subs);
                self.fanout(&mut subs, &frame);
                inner.clocks.get_mut(topic).unwrap().subs = subs;
            }
            BusFrame::Event { topic, .. } => {
                if let Some(mut subs) = inner.events.remove(topic) {
                    self.fanout(&mut subs, &frame);
                    inner.events.insert(topic.clone(), subs);
                }
            }
        }
    }
}

/// Adapts a frame receiver into a typed subscription on a helper thread.
pub(crate) fn typed<T: Send + 'static>(
    frames: Receiver<BusFrame>,
    map: impl Fn(BusFrame) -> Option<T> + Send + 'static,
    guard: Option<Box<dyn Send>>,
) -> Subscription<T> {
    let (tx, rx) = mpsc::channel();
    std::thread::Builder::new()
        .name("bus-sub".into())
        .spawn(move || {
            for frame in frames {
                if let Some(item) = map(frame) {
                    if tx.send(item).is_err() {
                        break;
                    }
                }
            }
        })
        .expect("spawn bus subscription thread");
    Subscription::new(rx, guard)
}

pub(crate) fn clock_of(frame: BusFrame) -> Option<ClockNotification> {
    match frame {
        BusFrame::Clock { ts, .. } => Some(ClockNotification { ts }),
        BusFrame::Event { .. } => None,
    }
}

pub(crate) fn event_of(frame: BusFrame) -> Option<UserEvent> {
    match frame {
        BusFrame::Event { event, .. } => Some(event),
        BusFrame::Clock { .. } => None,
    }
}

impl Publisher for MemoryBus {
    fn publish_clock(&self, client: &ClientId, ts: u64) -> Result<(), BusError> {
        self.publish_frame(BusFrame::Clock { topic: clock_topic(client), ts });
        Ok(())
    }

    fn publish_user_event(&self, assignment: &DocumentId, event: UserEvent) -> Result<(), BusError> {
        self.publish_frame(BusFrame::Event { topic: events_topic(assignment), event });
        Ok(())
    }
}

impl ClockFeed for MemoryBus {
    fn subscribe_clock(&self, client: &ClientId) -> Result<Subscription<ClockNotification>, BusError> {
        let (tx, rx) = mpsc::channel();
        self.attach(&clock_topic(client), tx);
        Ok(typed(rx, clock_of, None))
    }
}

impl EventFeed for MemoryBus {
    fn subscribe_events(&self, assignment: &DocumentId) -> Result<Subscription<UserEvent>, BusError> {
        let (tx, rx) = mpsc::channel();
        self.attach(&events_topic(assignment), tx);
        Ok(typed(rx, event_of, None))
    }
}

/// Client named by a clock frame's topic, if it is one.
pub fn frame_client(frame: &BusFrame) -> Option<ClientId> {
    match frame {
        BusFrame::Clock { topic, .. } => client_of_topic(topic),
        BusFrame::Event { .. } => None,
    }
}
