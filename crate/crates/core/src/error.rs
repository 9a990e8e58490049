//! Crate-wide error type and result alias.

use thiserror::Error;

/// Errors surfaced by model construction, solvers, and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, index bounds, or stored tables are inconsistent.
    #[error("structural error: {0}")]
    Structural(String),

    /// The utility constraint cannot be met by any policy.
    #[error("infeasible constraint: required {required:.9}, max achievable {max_achievable:.9}")]
    InfeasibleConstraint { required: f64, max_achievable: f64 },

    /// A schedule or experiment configuration is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// A numeric invariant failed (non-finite value, lost positive definiteness,
    /// unverified LP certificate, broken simplex constraint).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An input violated a documented call contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Random instance generation exhausted its retry budget.
    #[error("generation error: {0}")]
    Generation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for infeasibility, 3 for numeric
    /// failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InfeasibleConstraint { .. } => 2,
            Error::Numeric(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
