//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value produced by layer `{layer}`")]
    NumericOverflow { layer: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("batch normalization in training mode needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),

    #[error("tape is empty; run a forward pass before calling backward")]
    EmptyTape,

    #[error(
        "jacobian dimension {dim} exceeds the dense limit of {limit}; \
         use a stochastic trace estimator instead"
    )]
    JacobianTooLarge { dim: usize, limit: usize },

    #[error(
        "matrix is rank deficient at column {column} (residual norm {residual:e}); \
         redraw the weights with a new seed"
    )]
    RankDeficient { column: usize, residual: f64 },

    #[error("fixed-point iteration did not converge after {iterations} iterations (last iterate {last})")]
    NoConvergence { iterations: usize, last: f64 },

    #[error("no feasible subnet satisfies the constraint")]
    Infeasible,

    #[error(
        "expectation estimate has standard error {std_err:e} > eps/10 = {limit:e}; \
         increase expectation_samples"
    )]
    NoisyExpectation { std_err: f64, limit: f64 },

    #[error("orlicz norm search failed: empirical mean of psi(|X|/t) stays above 1 up to t = {t_max:e}")]
    HeavyTail { t_max: f64 },

    #[error("variance {variance} must exceed eps {eps} (the denominator is sqrt(v - eps))")]
    VarianceBelowEps { variance: f64, eps: f64 },

    #[error("parse error at byte offset {offset}: {msg}")]
    Parse { offset: u64, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged at step {step} on path {path}: {hint}")]
    Diverged { step: usize, path: String, hint: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
