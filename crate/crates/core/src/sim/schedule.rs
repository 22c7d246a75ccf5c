use crate::model::ClientId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// An RPC link outage. `client_id: None` takes the server down for everyone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Blackout {
    pub client_id: Option<ClientId>,
    pub start_ms: u64,
    pub end_ms: u64,
}

/// The agent process dies at `at_ms` and comes back `down_ms` later.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Restart {
    pub client_id: ClientId,
    pub at_ms: u64,
    pub down_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSchedule {
    pub seed: u64,
    pub notification_drop_p: f64,
    pub rpc_blackouts: Vec<Blackout>,
    pub agent_restarts: Vec<Restart>,
    /// One-way latency bounds for every RPC and notification.
    pub message_delay: (u64, u64),
}

pub fn client_name(i: usize) -> ClientId {
    ClientId::new(format!("client-{i}")).expect("valid id")
}

impl FaultSchedule {
    pub fn quiet(seed: u64) -> Self {
        Self { seed, notification_drop_p: 0.0, rpc_blackouts: Vec::new(), agent_restarts: Vec::new(), message_delay: (1, 20) }
    }

    /// Notification drop 0.3, two RPC blackouts and one agent restart, all
    /// within the first 20 s.
    pub fn random(seed: u64, clients: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_fa17);
        let clients = clients.max(1);
        let rpc_blackouts = (0..2)
            .map(|_| {
                let start_ms = rng.gen_range(0..15_000);
                let client_id = if rng.gen_bool(0.25) { None } else { Some(client_name(rng.gen_range(0..clients))) };
                Blackout { client_id, start_ms, end_ms: start_ms + rng.gen_range(500..8_000) }
            })
            .collect();
        let agent_restarts = vec![Restart {
            client_id: client_name(rng.gen_range(0..clients)),
            at_ms: rng.gen_range(500..20_000),
            down_ms: rng.gen_range(100..3_000),
        }];
        Self { seed, notification_drop_p: 0.3, rpc_blackouts, agent_restarts, message_delay: (1, 50) }
    }

    /// When the last fault is over.
    pub fn last_fault_ms(&self) -> u64 {
        let b = self.rpc_blackouts.iter().map(|b| b.end_ms);
        let r = self.agent_restarts.iter().map(|r| r.at_ms + r.down_ms);
        b.chain(r).max().unwrap_or(0)
    }

    pub fn link_down(&self, client: &ClientId, t: u64) -> bool {
        self.rpc_blackouts.iter().any(|b| {
            b.client_id.as_ref().map_or(true, |c| c == client) && (b.start_ms..b.end_ms).contains(&t)
        })
    }
}

/// What the simulated users ask of the simulated clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub clients: usize,
    pub tasks: usize,
    /// Every task publishes this many results before it exits.
    pub results_per_task: u32,
    /// Share of tasks that exit with an error after their results.
    #[serde(default)]
    pub error_p: f64,
    /// Share of tasks the user cancels at a random time.
    #[serde(default)]
    pub cancel_p: f64,
}

impl Workload {
    pub fn single() -> Self {
        Self { clients: 1, tasks: 1, results_per_task: 2, error_p: 0.0, cancel_p: 0.0 }
    }

    /// Up to 5 clients, 20 tasks and 5 results per task.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0b5e_55ed);
        Self {
            clients: rng.gen_range(1..=5),
            tasks: rng.gen_range(1..=20),
            results_per_task: rng.gen_range(0..=5),
            error_p: 0.1,
            cancel_p: 0.15,
        }
    }
}
