//! Excited random walks in i.i.d. cookie environments on `Z^d` and strips.
//!
//! * [`lattice`]: state spaces, the drift direction `l`, slabs.
//! * [`environment`]: cookie stacks, environment laws, lazily sampled
//!   environments with the leftover operator, shifts and the kernel `R`.
//! * [`walk`]: the stepping engine with local times, absorbed drift per slab,
//!   the martingale `M_n = X_n.l - D_n`, stopping rules and ladder times.
//! * [`oracle`]: exact absorption probabilities and expected absorbed drift
//!   on finite windows, plus a path-enumeration bracket.
//! * [`stats`]: estimators, the recurrence/transience classifier, the
//!   martingale and stopped-drift checks, parameter sweeps.
//! * [`config`]: the JSON schema shared by every front end.

pub mod config;
pub mod environment;
pub mod error;
pub mod lattice;
pub mod oracle;
pub mod parallel;
pub mod rng;
pub mod stats;
pub mod walk;

pub use config::RunConfig;
pub use environment::{Cookie, CookieStack, Delta, EnvironmentDistribution, SampledEnvironment};
pub use error::{ErwError, Result};
pub use lattice::{Direction, Lattice, Site};
pub use stats::{ClassificationResult, Estimate, Verdict};
pub use walk::{LineWalk, StopReason, StopRule, TrajectorySummary, Walk, WalkOptions, WalkState};
