//! Browser bindings. Each entry point takes a config in the `erw` JSON
//! schema and returns JSON; errors come back as `error[<kind>]: ...` strings.
//!
//! Work per call is capped so the page stays responsive.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use erw_core::oracle::{solve, FiniteInstance, OracleOptions};
use erw_core::rng::{next_unit, stream, TAG_WALK};
use erw_core::stats::{classify, ClassifyParams, RunSpec};
use erw_core::{ErwError, RunConfig, Walk};

/// Longest trajectory the page may request.
pub const MAX_STEPS: u64 = 1_000_000;
/// Points returned for plotting, at most.
pub const MAX_POINTS: u64 = 2_000;
/// Cap on replicas × horizon for one classification.
pub const MAX_WORK: u64 = 50_000_000;

fn load(config: &str, seed: u64) -> Result<(RunConfig, erw_core::SampledEnvironment), String> {
    let cfg = RunConfig::from_json(config).map_err(fail)?;
    let env = cfg.environment(seed).map_err(fail)?;
    Ok((cfg, env))
}

fn fail(e: ErwError) -> String {
    format!("error[{}]: {}", e.kind(), e.detail())
}

/// One walk of `steps` steps, subsampled to at most `MAX_POINTS` points.
pub fn trajectory_json(config: &str, seed: u64, steps: u64) -> Result<String, String> {
    if steps > MAX_STEPS {
        return Err(format!("error[refused]: at most {MAX_STEPS} steps"));
    }
    let (_, env) = load(config, seed)?;
    let origin = env.lattice().origin();
    let mut walk = Walk::new(&env, &origin).map_err(fail)?;
    let mut rng = stream(seed, 0, TAG_WALK);
    let every = steps.div_ceil(MAX_POINTS).max(1);
    let point = |w: &Walk| (w.state().position().to_vec(), w.state().projection());
    let mut points = vec![point(&walk)];
    for t in 1..=steps {
        walk.step(next_unit(&mut rng)).map_err(fail)?;
        if t % every == 0 || t == steps {
            points.push(point(&walk));
        }
    }
    let s = walk.state();
    let out = json!({
        "steps": steps,
        "every": every,
        "positions": points.iter().map(|p| p.0.clone()).collect::<Vec<_>>(),
        "projections": points.iter().map(|p| p.1).collect::<Vec<_>>(),
        "min_proj": s.min_proj(),
        "max_proj": s.max_proj(),
        "returns": s.returns_to_start(),
        "distinct_sites": s.distinct_sites(),
        "drift_total": s.drift_total(),
        "martingale": s.mart(),
    });
    Ok(out.to_string())
}

/// Finite-horizon verdict with its evidence.
pub fn classify_json(config: &str, seed: u64, replicas: u64, horizon: u64) -> Result<String, String> {
    if replicas.saturating_mul(horizon) > MAX_WORK {
        return Err(format!("error[refused]: replicas x horizon is capped at {MAX_WORK} here"));
    }
    let (cfg, env) = load(config, seed)?;
    let params = ClassifyParams { horizon, thresholds: cfg.thresholds(), force: false };
    let mut run = RunSpec::new(seed, replicas);
    if let Some(a) = cfg.averaging {
        run = run.averaging(a);
    }
    let res = classify(&env, &params, &run).map_err(fail)?;
    let mut v = serde_json::to_value(&res).map_err(|e| format!("error[internal]: {e}"))?;
    v["verdict"] = Value::from(res.verdict.to_string());
    Ok(v.to_string())
}

/// Exact exit probabilities of the config's window.
pub fn oracle_json(config: &str, seed: u64) -> Result<String, String> {
    let (cfg, env) = load(config, seed)?;
    let window = cfg.window().map_err(fail)?;
    let inst = FiniteInstance::from_environment(&env, window.left, window.right).map_err(fail)?;
    let start = window.start.clone().unwrap_or_else(|| env.lattice().origin());
    let sol = solve(&inst, &start, &OracleOptions::default()).map_err(fail)?;
    let out = json!({
        "p_right": sol.p_right,
        "p_left": sol.p_left,
        "expected_drift": sol.expected_drift,
        "states": sol.states,
    });
    Ok(out.to_string())
}

#[wasm_bindgen]
pub fn trajectory(config: &str, seed: u64, steps: u64) -> Result<String, JsValue> {
    trajectory_json(config, seed, steps).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = classifyConfig)]
pub fn classify_config(config: &str, seed: u64, replicas: u64, horizon: u64) -> Result<String, JsValue> {
    classify_json(config, seed, replicas, horizon).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn oracle(config: &str, seed: u64) -> Result<String, JsValue> {
    oracle_json(config, seed).map_err(|e| JsValue::from_str(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const Z: &str = r#"{"lattice": {"kind": "zd", "dim": 1}, "kappa": 0.25,
        "support": [{"probability": 1, "prefix": [[0.75, 0.25]], "tail": [0.5, 0.5]}],
        "window": {"left": 2, "right": 2},
        "classifier": {"osc_level": 0}}"#;

    const PLANE: &str = r#"{"lattice": {"kind": "zd", "dim": 2}, "kappa": 0.1,
        "support": [{"probability": 1, "prefix": [[0.35, 0.15, 0.25, 0.25]], "tail": [0.25, 0.25, 0.25, 0.25]}]}"#;

    const SRW: &str = r#"{"lattice": {"kind": "zd", "dim": 1}, "kappa": 0.25,
        "support": [{"probability": 1, "tail": [0.5, 0.5]}], "classifier": {"osc_level": 0}}"#;

    fn parse(s: &str) -> Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn trajectory_is_subsampled_and_reproducible() {
        let a = trajectory_json(PLANE, 4, 10_000).unwrap();
        assert_eq!(a, trajectory_json(PLANE, 4, 10_000).unwrap());
        let v = parse(&a);
        assert_eq!(v["every"], 5);
        assert_eq!(v["positions"].as_array().unwrap().len(), 2_001);
        assert_eq!(v["positions"][0], json!([0, 0]));
    }

    #[test]
    fn trajectory_refuses_long_runs() {
        assert!(trajectory_json(PLANE, 1, MAX_STEPS + 1).unwrap_err().starts_with("error[refused]"));
    }

    #[test]
    fn oracle_matches_the_known_window() {
        let v = parse(&oracle_json(Z, 0).unwrap());
        assert!((v["p_right"].as_f64().unwrap() - 0.78125).abs() < 1e-12);
        assert_eq!(v["states"], 12);
    }

    #[test]
    fn oracle_on_a_strip() {
        let strip = r#"{"lattice": {"kind": "strip", "width": 2}, "kappa": 0.05,
            "support": [{"probability": 1, "prefix": [[0.85, 0.05, 0.05, 0.05]], "tail": [0.45, 0.45, 0.05, 0.05]}],
            "window": {"left": 3, "right": 3}}"#;
        let v = parse(&oracle_json(strip, 7).unwrap());
        assert!(v["p_right"].as_f64().unwrap() > 0.5);
    }

    #[test]
    fn classify_reports_a_verdict() {
        let v = parse(&classify_json(SRW, 3, 50, 20_000).unwrap());
        assert_eq!(v["verdict"], "Recurrent");
        assert!(v["evidence"]["return_fraction"].as_f64().unwrap() > 0.9);
    }

    #[test]
    fn errors_carry_their_kind() {
        assert!(classify_json(PLANE, 1, 10, 100).unwrap_err().starts_with("error[refused]"));
        assert!(classify_json(Z, 1, 1_000, 1_000_000).unwrap_err().starts_with("error[refused]"));
        assert!(oracle_json(PLANE, 1).unwrap_err().starts_with("error[config]"));
        assert!(trajectory_json("{", 1, 10).unwrap_err().starts_with("error[config]"));
    }
}
