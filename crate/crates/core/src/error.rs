use thiserror::Error;

/// Invalid or missing configuration.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum ConfigError {
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

impl ConfigError {
    pub fn invalid(key: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn key(&self) -> &str {
        match self {
            ConfigError::Missing(k) => k,
            ConfigError::Invalid { key, .. } => key,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ScheduleError {
    #[error("send of message {msg} has no matching receive")]
    UnmatchedSend { msg: u32 },
    #[error("receive of message {msg} has no matching send")]
    UnmatchedRecv { msg: u32 },
    #[error("dependency cycle through step {step}")]
    Cycle { step: u32 },
    #[error("step {step} depends on unknown step {dep}")]
    DanglingDependency { step: u32, dep: u32 },
    #[error("initial data has {got} nodes, schedule expects {expected}")]
    NodeCount { expected: usize, got: usize },
    #[error("initial vectors must all have length {expected}, node {node} has {got}")]
    VectorLength {
        node: usize,
        expected: usize,
        got: usize,
    },
    #[error("message {msg} consumed before it was received")]
    NotReceived { msg: u32 },
}

/// The engine ran out of events with work still pending.
#[derive(Debug, Clone, Error, PartialEq)]
#[error("deadlock at cycle {cycle}: {} blocked step(s)", blocked.len())]
pub struct Deadlock {
    pub cycle: u64,
    /// Human-readable description of each blocked step.
    pub blocked: Vec<String>,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Deadlock(#[from] Deadlock),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
