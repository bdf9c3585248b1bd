use thiserror::Error;

/// Errors produced by simulation and analysis routines.
#[derive(Debug, Error)]
pub enum Error {
    /// A run parameter is invalid or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an API contract (e.g. an observation was required but absent).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Simulated state became non-finite.
    #[error("simulation fault at round {round}: {message}")]
    Simulation { round: usize, message: String },

    /// An exhaustive enumeration was requested beyond its branch budget.
    #[error("enumeration horizon {requested} exceeds budget (max {max}); use Monte Carlo instead")]
    EnumerationBudget { requested: usize, max: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
