use thiserror::Error;

/// Errors raised by the simulation engine, the oracles and the estimators.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ErwError {
    /// Invalid lattice point, dimension mismatch, malformed path or parameter.
    #[error("domain error: {0}")]
    Domain(String),

    /// Cookie or distribution outside the admissible environment space.
    #[error("environment error: {0}")]
    Environment(String),

    /// Integer coordinate overflow while moving the walker.
    #[error("coordinate overflow at {0:?}")]
    Overflow(Vec<i64>),

    /// A walk visited more distinct sites than the configured cap.
    #[error("distinct-site cap of {cap} exceeded")]
    SiteCapExceeded { cap: usize },

    /// Step budget exhausted before a stopping time that should be finite.
    #[error("step budget of {budget} exhausted before the stopping time")]
    Timeout { budget: u64 },

    /// Finite instance state space larger than the configured cap.
    #[error("instance too large: {states} states exceeds cap {cap}")]
    InstanceTooLarge { states: u128, cap: u128 },

    /// Experiment refused (infinite mean drift, near-critical parameters, unsupported lattice).
    #[error("refused: {0}")]
    Refused(String),

    /// Engine or solver inconsistency; always a bug or a numerical breakdown.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ErwError>;

impl ErwError {
    /// Short machine-readable category, used as the `error[...]` prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            ErwError::Domain(_) => "domain",
            ErwError::Environment(_) => "environment",
            ErwError::Overflow(_) => "overflow",
            ErwError::SiteCapExceeded { .. } => "site-cap",
            ErwError::Timeout { .. } => "timeout",
            ErwError::InstanceTooLarge { .. } => "instance-too-large",
            ErwError::Refused(_) => "refused",
            ErwError::Internal(_) => "internal",
            ErwError::Config(_) => "config",
        }
    }

    /// The message without the category `kind` already names.
    pub fn detail(&self) -> String {
        match self {
            ErwError::Domain(m)
            | ErwError::Environment(m)
            | ErwError::Refused(m)
            | ErwError::Internal(m)
            | ErwError::Config(m) => m.clone(),
            other => other.to_string(),
        }
    }
}
