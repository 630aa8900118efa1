use thiserror::Error;

/// Errors produced by the tabular learning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid table: {0}")]
    InvalidTable(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid gridworld: {0}")]
    InvalidGridworld(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),
    #[error("insufficient pool: requested {requested} trajectories from a pool of {available}")]
    InsufficientPool { requested: usize, available: usize },
    #[error("training diverged at step {step}: objective {value}")]
    Divergence { step: usize, value: f64 },
    #[error("singular linear system while solving for occupancy")]
    Singular,
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
