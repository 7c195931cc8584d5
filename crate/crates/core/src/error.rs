use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("arity mismatch: expected {expected}, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("unknown vehicle id {0}")]
    UnknownVehicle(u32),
    #[error("start layout holds {capacity} vehicles but {requested} were requested")]
    Capacity { capacity: usize, requested: usize },
    #[error("coincident vehicle centers; collision normal undefined")]
    DegenerateNormal,
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing checkpoint for round(s) {0:?}")]
    MissingRounds(Vec<usize>),
    #[error("parameter checksum of frozen {role} changed during a {phase} pass")]
    FreezeViolation { role: &'static str, phase: &'static str },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("checkpoint was written under config {found} but the loading config is {expected}; pass --force to override")]
    HashMismatch { expected: String, found: String },
    #[error("truncated file {0}")]
    Truncated(String),
    #[error("checksum mismatch in {0}")]
    Checksum(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("output directory {0} is locked by another run")]
    Locked(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl Error {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io { path: path.display().to_string(), source }
    }
}
