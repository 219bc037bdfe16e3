//! Library error type. Display strings double as the stable error codes the
//! CLI prints, so they are kebab-case and stay short.

use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("extrapolation-error: x = {x} outside table range [{lo}, {hi}]")]
    Extrapolation { x: f64, lo: f64, hi: f64 },

    #[error("infeasible-problem: {0}")]
    InfeasibleProblem(String),

    #[error("invalid-spec: {0}")]
    InvalidSpec(String),

    #[error("method-inapplicable: {0}")]
    MethodInapplicable(String),

    #[error("ladder-epoch-not-integrable: {0}")]
    LadderEpochNotIntegrable(String),

    #[error("estimation-failed: {0}")]
    EstimationFailed(String),

    #[error("ill-conditioned-ratio: {0}")]
    IllConditionedRatio(String),

    #[error("bracket-not-found: {0}")]
    BracketNotFound(String),

    #[error("root-inconclusive: bracket ({lo}, {hi}) with CI straddling zero")]
    RootInconclusive { lo: f64, hi: f64 },

    #[error("assumption-violated: {0}")]
    AssumptionViolated(String),

    #[error("dp-failed: {0}")]
    DpFailed(String),

    #[error("oracle-failed: {0}")]
    OracleFailed(String),
}

pub type Result<T> = std::result::Result<T, Error>;
