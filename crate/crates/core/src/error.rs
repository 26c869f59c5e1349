use thiserror::Error;

use crate::optim::TrainTrace;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("enumeration cap exceeded: {count} items > cap {cap}")]
    EnumerationCap { count: u128, cap: u64 },

    #[error("invalid environment: {0}")]
    InvalidEnv(String),

    #[error("unknown output {sequence:?} for prompt {prompt}")]
    UnknownOutput { prompt: usize, sequence: Vec<u32> },

    #[error("baseline precondition violated: {0}")]
    Baseline(String),

    #[error("group size {group} is too small: {reason}")]
    GroupTooSmall { group: usize, reason: &'static str },

    #[error(
        "coverage violation: prompt {prompt} state {state} token {token} has probability {prob:e} below floor {floor:e} under the {policy} policy"
    )]
    Coverage {
        prompt: usize,
        state: usize,
        token: u32,
        prob: f64,
        floor: f64,
        policy: &'static str,
    },

    #[error("output {output} of prompt {prompt} has zero probability under the sampling policy")]
    ZeroProbability { prompt: usize, output: usize },

    #[error("parameter dimension {dim} exceeds the cap {cap}")]
    DimensionCap { dim: usize, cap: usize },

    #[error("learning-rate schedule constraint violated: {0}")]
    Schedule(String),

    #[error("no admissible probes: {0}")]
    NoAdmissibleProbes(String),

    #[error("stability condition violated: {0}")]
    Stability(String),

    #[error("matrix is not negative semidefinite: eigenvalue {eigenvalue:e} of -H is below -{tol:e}")]
    NotNegativeSemidefinite { eigenvalue: f64, tol: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("parameters diverged at iteration {iteration}")]
    Diverged {
        iteration: usize,
        trace: Box<TrainTrace>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("spec parse error: {0}")]
    Parse(String),
}

impl From<toml::de::Error> for LabError {
    fn from(e: toml::de::Error) -> Self {
        LabError::Parse(e.to_string())
    }
}
