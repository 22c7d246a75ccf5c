//! Agent configuration file and retry policy.

use crate::model::ClientId;
use crate::sandbox::Limits;
use crate::signal::SourceConfig;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

pub const CONFIG_ENV: &str = "SPADA_CONFIG";

fn default_python() -> Vec<String> {
    vec!["python3".into()]
}

fn default_grace() -> u64 {
    5
}

fn default_window() -> u64 {
    30
}

fn default_isolate() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SandboxConfig {
    /// Interpreter command; the payload file is appended.
    #[serde(default = "default_python")]
    pub python_cmd: Vec<String>,
    #[serde(default = "default_grace")]
    pub grace_seconds: u64,
    /// Extra environment for payloads.
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    #[serde(default)]
    pub limits: Limits,
    /// Run each sandbox under its own uid when the agent is root.
    #[serde(default = "default_isolate")]
    pub isolate: bool,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self {
            python_cmd: default_python(),
            grace_seconds: default_grace(),
            env: BTreeMap::new(),
            limits: Limits::default(),
            isolate: default_isolate(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryConfig {
    pub base_ms: u64,
    pub cap_ms: u64,
}

impl Default for RetryConfig {
    fn default() -> Self {
        Self { base_ms: 1_000, cap_ms: 60_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub client_id: ClientId,
    pub server_addr: String,
    pub bus_addr: String,
    pub token: String,
    pub data_dir: PathBuf,
    #[serde(default)]
    pub sandbox: SandboxConfig,
    #[serde(default = "default_window")]
    pub online_window_s: u64,
    /// Seconds between liveness fetches; defaults to a third of the online
    /// window. Zero disables them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heartbeat_s: Option<u64>,
    #[serde(default)]
    pub signals: Vec<SourceConfig>,
    #[serde(default)]
    pub retry: RetryConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
}

/// `$SPADA_CONFIG` if set, else `default`.
pub fn config_path(default: &Path) -> PathBuf {
    std::env::var_os(CONFIG_ENV).map(PathBuf::from).unwrap_or_else(|| default.to_owned())
}

pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_owned(), source })?;
    serde_json::from_str(&text).map_err(|source| ConfigError::Parse { path: path.to_owned(), source })
}

impl AgentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        load_json(path)
    }

    pub fn heartbeat(&self) -> Option<Duration> {
        let secs = self.heartbeat_s.unwrap_or((self.online_window_s / 3).max(1));
        (secs > 0).then(|| Duration::from_secs(secs))
    }

    pub fn grace(&self) -> Duration {
        Duration::from_secs(self.sandbox.grace_seconds)
    }
}

/// Capped exponential backoff with equal jitter: attempt `k` waits between
/// half and all of `min(cap, base * 2^k)`.
#[derive(Debug, Clone)]
pub struct Backoff {
    policy: RetryConfig,
    attempt: u32,
}

impl Backoff {
    pub fn new(policy: RetryConfig) -> Self {
        Self { policy, attempt: 0 }
    }

    pub fn attempt(&self) -> u32 {
        self.attempt
    }

    pub fn reset(&mut self) {
        self.attempt = 0;
    }

    /// Upper bound of the next delay.
    pub fn ceiling(&self) -> Duration {
        let exp = self.policy.base_ms.saturating_mul(1u64 << self.attempt.min(32));
        Duration::from_millis(exp.min(self.policy.cap_ms))
    }

    pub fn next_delay<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Duration {
        let d = self.ceiling().as_millis() as u64;
        self.attempt = self.attempt.saturating_add(1);
        let half = d / 2;
        Duration::from_millis(half + rng.gen_range(0..=d - half))
    }
}
