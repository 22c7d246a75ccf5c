//! Edge task orchestration with logically clocked state synchronization.
//!
//! Users commit assignments of client-specific tasks to a central store.
//! Each client agent follows a per-client logical clock published on a
//! notification bus, fetches its active task set when it falls behind,
//! runs payloads in sandboxed child processes and forwards their results
//! through a durable outbox until the server confirms them.
//!
//! Module map:
//!
//! - [`model`]: documents, identifiers and the task status state machine.
//! - [`store`]: transactional persistence and per-client logical clocks.
//! - [`bus`]: retained per-client clock topics and user event fanout.
//! - [`server`]: stateless request handlers, RPC framing and HTTP mapping.
//! - [`agent`]: the sync loop, durable result cache and agent runtime.
//! - [`sandbox`]: payload processes and the task-local API.
//! - [`signal`]: latest-value signal cache over pluggable sources.
//! - [`sdk`]: the user-facing draft/commit/await surface.
//! - [`sim`]: deterministic fault injection, model checking and latency bench.

pub mod agent;
pub mod bus;
pub mod clock;
pub mod error;
pub mod model;
pub mod rpc;
pub mod sandbox;
pub mod sdk;
pub mod server;
pub mod signal;
pub mod sim;
pub mod store;

pub use clock::{Clock, ManualClock, SystemClock};
pub use error::{ApiError, ErrorCode};
pub use model::{
    AssignmentDoc, ClientId, ClientStateSnapshot, CommitBatch, DocumentId, ParametersDoc,
    PayloadDoc, ResultRecord, TaskDoc, TaskStatus, TaskSummary, TreeValue,
};
