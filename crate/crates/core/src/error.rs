use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid gaussian mixture: {0}")]
    InvalidMixture(String),

    #[error("component {component} has a singular covariance and regularization is disabled")]
    SingularCovariance { component: usize },

    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),

    #[error("timestep {t} out of range [{min}, {max}]")]
    TimestepOutOfRange { t: usize, min: usize, max: usize },

    #[error("one-step variance beta_{t_next} is zero; the reverse posterior is a point mass")]
    DegenerateKernel { t_next: usize },

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("invalid discriminator: {0}")]
    InvalidDiscriminator(String),

    #[error("discriminator training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    TrainingDiverged {
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unsupported checkpoint version {found:?} (expected {expected:?})")]
    CheckpointVersion { found: String, expected: String },

    #[error("model evaluation budget of {limit} exhausted")]
    BudgetExhausted { limit: usize },

    #[error("chain {chain} exceeded {limit} restarts")]
    RestartLimit { chain: usize, limit: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
