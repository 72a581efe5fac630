use std::path::PathBuf;

/// Errors produced by the simulator and the allocation stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid rate table: {0}")]
    InvalidRateTable(String),
    #[error("invalid scenario parameters: {0}")]
    InvalidScenario(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("selected channel rows are rank deficient (sigma_min/sigma_max = {ratio:e})")]
    RankDeficient { ratio: f64 },
    #[error("instance too large for exhaustive search: {0}")]
    TooLarge(String),
    #[error(
        "scenario infeasible: user slot {slot} still below the lowest MCS after {attempts} redraws"
    )]
    InfeasibleScenario { slot: usize, attempts: usize },
    #[error("estimator unavailable: {0}")]
    ModelUnavailable(String),
    #[error("malformed estimator response: {0}")]
    MalformedResponse(String),
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
