use prunekit_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceLength { len: usize, max: usize },
    #[error("data error: {0}")]
    Data(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("non-finite loss at step {step}: {breakdown}")]
    NonFiniteLoss { step: usize, breakdown: String },
    #[error("infeasible plan: target ratio {target:.4} exceeds maximum achievable {max_achievable:.4} under floors")]
    InfeasiblePlan { target: f64, max_achievable: f64 },
    #[error("plan-model mismatch: {0}")]
    PlanMismatch(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("out of validated range: {0}")]
    OutOfRange(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }
}
