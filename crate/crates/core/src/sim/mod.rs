//! Fault injection, model checking and latency measurement.

pub mod convergence;
pub mod latency;
pub mod model_check;
pub mod schedule;
pub mod stateless;

pub use convergence::{run_convergence, SimReport, SimStats, Simulation, Verdict, QUIESCENCE_BOUND_MS};
pub use schedule::{Blackout, FaultSchedule, Restart, Workload};
pub use model_check::{model_check_sync_loop, Counterexample, ModelCheckReport};
pub use latency::{run_latency_bench, BenchOptions, BenchReport, Deployment, LatencySample, Summary};
pub use stateless::stateless_equivalent;
