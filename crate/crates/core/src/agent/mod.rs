//! The client agent: the sync loop, its durable outbox, the document cache
//! and the runtime that wires them to sandboxes and the server.

pub mod cache;
pub mod config;
pub mod doc_cache;
pub mod runtime;
pub mod sync_loop;

pub use cache::DurableCache;
pub use config::{AgentConfig, Backoff, RetryConfig, SandboxConfig};
pub use runtime::{Agent, AgentCounters, AgentDeps, AgentError, InProcessLink, RpcLink, ServerLink, StopHandle};
pub use sync_loop::{
    plan_reconcile, AgentEvent, AgentState, Effect, LocalSync, LocalTaskEntry, LocalView, PendingResult,
    ReconcilePlan, StartPlan, SubmitPlan, TaskOutput,
};

#[cfg(test)]
mod tests;
