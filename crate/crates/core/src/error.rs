use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("decomposition did not converge after {sweeps} sweeps")]
    DecompositionFailure { sweeps: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("undefined ratio: {0}")]
    UndefinedRatio(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown weight target `{0}` (expected w_g, w_u or w_d)")]
    UnknownTarget(String),

    #[error("training diverged at step {step} (loss = {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("simulation unstable at step {step}: loss {loss:e} exceeds 10x the initial {initial:e}")]
    Instability { step: usize, loss: f64, initial: f64 },

    #[error("gradient check failed: max relative error {0:e}")]
    GradCheck(f64),

    #[error("unknown experiment `{0}`")]
    UnknownExperiment(String),

    #[error("invariant check failed: {0}")]
    InvariantFailure(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, expected: impl ToString, got: impl ToString) -> Error {
    Error::Dimension {
        op,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
