//! Shared domain types: documents, identifiers and the task status state
//! machine. Everything here is a plain immutable value; mutation happens
//! only inside a [`crate::store::StateStore`].

use rand::RngCore;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Tree-structured values (parameters, results, signal readings) use the
/// JSON data model directly.
pub type TreeValue = serde_json::Value;

/// Milliseconds since the Unix epoch (or virtual epoch under simulation).
pub type Millis = u64;

pub const MAX_PAYLOAD_NAME_CHARS: usize = 256;
pub const MAX_CLIENT_ID_CHARS: usize = 128;
pub const MAX_ERROR_LOG_BYTES: usize = 64 * 1024;

/// Serialize with sorted object keys and no insignificant whitespace.
///
/// Goes through [`serde_json::Value`], whose object map is ordered by key.
pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> String {
    match serde_json::to_value(value) {
        Ok(v) => v.to_string(),
        // Only non-string map keys can fail here; none of our types have them.
        Err(e) => panic!("value is not representable as canonical JSON: {e}"),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IdError {
    #[error("entropy source exhausted: {0}")]
    Entropy(String),
    #[error("malformed document id {0:?}")]
    Malformed(String),
}

/// 128-bit random document identifier, rendered as 32 lowercase hex digits.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DocumentId([u8; 16]);

impl DocumentId {
    pub const fn from_bytes(bytes: [u8; 16]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }

    /// Draws 16 bytes from `entropy`.
    pub fn generate<R: RngCore + ?Sized>(entropy: &mut R) -> Result<Self, IdError> {
        let mut bytes = [0u8; 16];
        entropy
            .try_fill_bytes(&mut bytes)
            .map_err(|e| IdError::Entropy(e.to_string()))?;
        Ok(Self(bytes))
    }

    /// Fresh id from the thread-local OS-seeded generator.
    pub fn random() -> Self {
        let mut bytes = [0u8; 16];
        rand::thread_rng().fill_bytes(&mut bytes);
        Self(bytes)
    }
}

impl fmt::Display for DocumentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for DocumentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DocumentId({self})")
    }
}

impl FromStr for DocumentId {
    type Err = IdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 32 || s.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(IdError::Malformed(s.to_owned()));
        }
        let mut bytes = [0u8; 16];
        hex::decode_to_slice(s, &mut bytes).map_err(|_| IdError::Malformed(s.to_owned()))?;
        Ok(Self(bytes))
    }
}

impl Serialize for DocumentId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for DocumentId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Operator-assigned client identifier.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ClientId(String);

impl ClientId {
    pub fn new(id: impl Into<String>) -> Result<Self, String> {
        let id = id.into();
        if id.is_empty() {
            return Err("client id must not be empty".into());
        }
        if id.chars().count() > MAX_CLIENT_ID_CHARS {
            return Err(format!("client id longer than {MAX_CLIENT_ID_CHARS} chars"));
        }
        // Client ids are embedded in bus topic names.
        if id.contains('/') || id.chars().any(char::is_whitespace) {
            return Err(format!("client id {id:?} contains '/' or whitespace"));
        }
        Ok(Self(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for ClientId {
    type Error = String;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<ClientId> for String {
    fn from(value: ClientId) -> Self {
        value.0
    }
}

impl FromStr for ClientId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::new(s)
    }
}

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ClientId({})", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskStatus {
    Active,
    Finished,
    Error,
    Canceled,
}

impl TaskStatus {
    pub const ALL: [TaskStatus; 4] = [
        TaskStatus::Active,
        TaskStatus::Finished,
        TaskStatus::Error,
        TaskStatus::Canceled,
    ];

    pub fn is_terminal(self) -> bool {
        self != TaskStatus::Active
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskStatus::Active => "ACTIVE",
            TaskStatus::Finished => "FINISHED",
            TaskStatus::Error => "ERROR",
            TaskStatus::Canceled => "CANCELED",
        }
    }
}

impl fmt::Display for TaskStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskStatus {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskStatus::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown task status {s:?}"))
    }
}

/// The only legal moves are out of ACTIVE into one of the terminal states.
pub fn validate_transition(from: TaskStatus, to: TaskStatus) -> bool {
    from == TaskStatus::Active && to.is_terminal()
}

/// Keeps the last [`MAX_ERROR_LOG_BYTES`] bytes of a log, cut at a char
/// boundary so the result stays valid UTF-8.
pub fn truncate_error_log(log: &str) -> String {
    if log.len() <= MAX_ERROR_LOG_BYTES {
        return log.to_owned();
    }
    let mut start = log.len() - MAX_ERROR_LOG_BYTES;
    while !log.is_char_boundary(start) {
        start += 1;
    }
    log[start..].to_owned()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayloadDoc {
    pub id: DocumentId,
    pub name: String,
    pub body: String,
    pub created_at: Millis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametersDoc {
    pub id: DocumentId,
    pub value: TreeValue,
    pub created_at: Millis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDoc {
    pub id: DocumentId,
    pub assignment_id: DocumentId,
    pub client_id: ClientId,
    pub payload_id: DocumentId,
    pub parameters_id: Option<DocumentId>,
    pub status: TaskStatus,
    pub result_count: u64,
    pub error_log: Option<String>,
    pub created_at: Millis,
    pub terminal_at: Option<Millis>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentDoc {
    pub id: DocumentId,
    pub name: String,
    pub task_ids: Vec<DocumentId>,
    pub created_at: Millis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub task_id: DocumentId,
    pub seq: u64,
    pub value: TreeValue,
    pub produced_at: Millis,
    pub recorded_at: Option<Millis>,
}

/// A task as the client sees it in a state snapshot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task_id: DocumentId,
    pub payload_id: DocumentId,
    pub parameters_id: Option<DocumentId>,
    pub result_count: u64,
}

/// The server's answer to a state fetch: the client's logical clock and
/// all of its ACTIVE tasks, read in one transaction.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClientStateSnapshot {
    pub ts: u64,
    pub tasks: Vec<TaskSummary>,
}

impl ClientStateSnapshot {
    pub fn task(&self, id: &DocumentId) -> Option<&TaskSummary> {
        self.tasks.iter().find(|t| &t.task_id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientDescriptor {
    pub client_id: ClientId,
    pub ts: u64,
    pub last_seen: Option<Millis>,
    pub online: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewPayload {
    pub id: DocumentId,
    pub name: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewParameters {
    pub id: DocumentId,
    pub value: TreeValue,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewTask {
    pub id: DocumentId,
    pub assignment_id: DocumentId,
    pub client_id: ClientId,
    pub payload_id: DocumentId,
    pub parameters_id: Option<DocumentId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewAssignment {
    pub id: DocumentId,
    pub name: String,
    pub task_ids: Vec<DocumentId>,
}

/// A user commit. The store stamps timestamps and initial task state, so a
/// batch only carries what the user decides.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CommitBatch {
    #[serde(default)]
    pub payloads: Vec<NewPayload>,
    #[serde(default)]
    pub parameters: Vec<NewParameters>,
    #[serde(default)]
    pub tasks: Vec<NewTask>,
    #[serde(default)]
    pub assignments: Vec<NewAssignment>,
}

impl CommitBatch {
    pub fn is_empty(&self) -> bool {
        self.payloads.is_empty()
            && self.parameters.is_empty()
            && self.tasks.is_empty()
            && self.assignments.is_empty()
    }

    pub fn ids(&self) -> Vec<DocumentId> {
        self.payloads
            .iter()
            .map(|d| d.id)
            .chain(self.parameters.iter().map(|d| d.id))
            .chain(self.tasks.iter().map(|d| d.id))
            .chain(self.assignments.iter().map(|d| d.id))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultSubmission {
    pub task_id: DocumentId,
    pub seq: u64,
    pub value: TreeValue,
    pub produced_at: Millis,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusSubmission {
    pub task_id: DocumentId,
    pub status: TaskStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_log: Option<String>,
}

/// Client-originated mutations, sent in one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitBatch {
    pub client_id: ClientId,
    #[serde(default)]
    pub results: Vec<ResultSubmission>,
    #[serde(default)]
    pub statuses: Vec<StatusSubmission>,
}
