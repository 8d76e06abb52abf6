//! The JSON experiment schema shared by every front end.
//!
//! ```json
//! {
//!   "lattice": { "kind": "strip", "width": 2 },
//!   "direction": [1, 0],
//!   "kappa": 0.05,
//!   "support": [
//!     { "probability": 1.0,
//!       "prefix": [[0.55, 0.35, 0.05, 0.05]],
//!       "tail": [0.45, 0.45, 0.05, 0.05] }
//!   ],
//!   "seed": 7,
//!   "replicas": 1000,
//!   "horizon": 1000000
//! }
//! ```
//!
//! `direction` is either numbers or `[numerator, denominator]` pairs and
//! defaults to `e1`. A sweep replaces `support` by a `family`; the oracle
//! reads `window`. Unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::environment::{Cookie, CookieStack, EnvironmentDistribution, SampledEnvironment};
use crate::error::{ErwError, Result};
use crate::lattice::{Direction, Lattice};
use crate::rng::MIXER_NAME;
use crate::stats::{base_environment, Averaging, EnvironmentFamily, Thresholds};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DirectionSpec {
    Exact(Vec<(i64, i64)>),
    Float(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupportEntry {
    pub probability: f64,
    #[serde(default)]
    pub prefix: Vec<Cookie>,
    pub tail: Cookie,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackSpec {
    #[serde(default)]
    pub prefix: Vec<Cookie>,
    pub tail: Cookie,
}

/// A per-site override applied on top of the sampled environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteSpec {
    pub site: Vec<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stack: Option<StackSpec>,
    /// Cookies already eaten at the site.
    #[serde(default)]
    pub consumed: u64,
}

/// Family over the top-level lattice and `kappa`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilySpec {
    DriftLadder { base: Cookie, max_cookie_drift: f64 },
}

/// Absorbing window `(-left, right)` and the start site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub left: i64,
    pub right: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<Vec<i64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub lattice: Lattice,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<DirectionSpec>,
    pub kappa: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub support: Vec<SupportEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<FamilySpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sites: Vec<SiteSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<WindowSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replicas: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub averaging: Option<Averaging>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier: Option<Thresholds>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_list: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_list: Option<Vec<u64>>,
    /// Per-walk step cap for hitting-time experiments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixer: Option<String>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| ErwError::Config(e.to_string()))?;
        cfg.lattice.check().map_err(|e| ErwError::Config(e.to_string()))?;
        if let Some(m) = &cfg.mixer {
            if m != MIXER_NAME {
                return Err(ErwError::Config(format!("mixer {m:?} is not supported; this build uses {MIXER_NAME:?}")));
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn direction(&self) -> Result<Direction> {
        match &self.direction {
            None => Ok(Direction::e1(self.lattice.dim())),
            Some(DirectionSpec::Exact(pairs)) => Direction::from_rationals(&self.lattice, pairs),
            Some(DirectionSpec::Float(w)) => Direction::new(&self.lattice, w.clone()),
        }
    }

    /// The environment law, unvalidated so callers can list violations.
    pub fn distribution(&self) -> Result<EnvironmentDistribution> {
        if self.support.is_empty() {
            return Err(ErwError::Config("config has no support".into()));
        }
        let support =
            self.support.iter().map(|e| (CookieStack::new(e.prefix.clone(), e.tail.clone()), e.probability)).collect();
        Ok(EnvironmentDistribution::new(self.lattice, self.direction()?, self.kappa, support))
    }

    pub fn family(&self) -> Result<EnvironmentFamily> {
        match &self.family {
            Some(FamilySpec::DriftLadder { base, max_cookie_drift }) => Ok(EnvironmentFamily::DriftLadder {
                lattice: self.lattice,
                kappa: self.kappa,
                base: base.clone(),
                max_cookie_drift: *max_cookie_drift,
            }),
            None => Err(ErwError::Config("config has no family".into())),
        }
    }

    /// The sampled environment under `seed` with the site overrides applied.
    pub fn environment(&self, seed: u64) -> Result<SampledEnvironment> {
        let mut env = base_environment(self.distribution()?, seed)?;
        for s in &self.sites {
            if let Some(stack) = &s.stack {
                env = env.with_stack(&s.site, CookieStack::new(stack.prefix.clone(), stack.tail.clone()))?;
            }
        }
        let consumed: Vec<(&[i64], u64)> =
            self.sites.iter().filter(|s| s.consumed > 0).map(|s| (s.site.as_slice(), s.consumed)).collect();
        if !consumed.is_empty() {
            env = env.with_consumed(consumed)?;
        }
        Ok(env)
    }

    pub fn window(&self) -> Result<&WindowSpec> {
        self.window.as_ref().ok_or_else(|| ErwError::Config("config has no window".into()))
    }

    pub fn thresholds(&self) -> Thresholds {
        self.classifier.unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"{
        "lattice": {"kind": "strip", "width": 2},
        "direction": [[1, 1], [0, 1]],
        "kappa": 0.05,
        "support": [
            {"probability": 0.3, "prefix": [[0.55, 0.35, 0.05, 0.05]], "tail": [0.45, 0.45, 0.05, 0.05]},
            {"probability": 0.7, "tail": [0.25, 0.25, 0.25, 0.25]}
        ],
        "family": {"kind": "drift_ladder", "base": [0.45, 0.45, 0.05, 0.05], "max_cookie_drift": 0.4},
        "sites": [{"site": [1, 0], "stack": {"prefix": [[0.7, 0.1, 0.1, 0.1]], "tail": [0.25, 0.25, 0.25, 0.25]}},
                  {"site": [0, 1], "consumed": 2}],
        "window": {"left": 2, "right": 3, "start": [0, 0]},
        "seed": 7, "replicas": 10, "horizon": 1000, "jobs": 2, "averaging": "quenched",
        "classifier": {"theta_t": 0.9, "theta_r": 0.9, "osc_level": 0.1, "escape_level": 12.5},
        "grid": [0.2, 0.8], "n_list": [100], "x_list": [1, 5], "budget": 100000,
        "mixer": "splitmix64-finalizer"
    }"#;

    #[test]
    fn round_trip_is_lossless() {
        let cfg = RunConfig::from_json(FULL).unwrap();
        let text = cfg.to_json();
        let again = RunConfig::from_json(&text).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(text, again.to_json());
    }

    #[test]
    fn awkward_floats_round_trip() {
        let mut cfg = RunConfig::from_json(FULL).unwrap();
        cfg.kappa = 0.1 + 0.2;
        cfg.support[0].probability = 1.0 / 3.0;
        cfg.direction = Some(DirectionSpec::Float(vec![1.0, 0.0]));
        let again = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn builds_everything() {
        let cfg = RunConfig::from_json(FULL).unwrap();
        assert!(cfg.direction().unwrap().is_exact());
        assert!(cfg.distribution().unwrap().check().is_ok());
        assert!(cfg.family().unwrap().at(0.8).is_ok());
        let env = cfg.environment(7).unwrap();
        assert_eq!(env.offset(&[0, 1]).unwrap(), 2);
        assert_eq!(env.site_stack(&[1, 0]).unwrap().prefix[0].probs, vec![0.7, 0.1, 0.1, 0.1]);
        assert_eq!(cfg.thresholds().escape_level, 12.5);
    }

    #[test]
    fn minimal_config_defaults() {
        let cfg = RunConfig::from_json(
            r#"{"lattice": {"kind": "zd", "dim": 1}, "kappa": 0.2,
            "support": [{"probability": 1, "tail": [0.5, 0.5]}]}"#,
        )
        .unwrap();
        assert_eq!(cfg.direction().unwrap().weights(), &[1.0]);
        assert_eq!(cfg.thresholds(), Thresholds::default());
        assert!(cfg.seed.is_none());
        assert!(matches!(cfg.family(), Err(ErwError::Config(_))));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(RunConfig::from_json("{"), Err(ErwError::Config(_))));
        let unknown = FULL.replacen("\"kappa\"", "\"kapa\": 1, \"kappa\"", 1);
        assert!(matches!(RunConfig::from_json(&unknown), Err(ErwError::Config(_))));
        let mixer = FULL.replace("splitmix64-finalizer", "pcg");
        assert!(matches!(RunConfig::from_json(&mixer), Err(ErwError::Config(_))));
        let narrow = FULL.replace("\"width\": 2", "\"width\": 1");
        assert!(matches!(RunConfig::from_json(&narrow), Err(ErwError::Config(_))));
    }
}
