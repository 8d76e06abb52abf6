//! Estimators, hypothesis checks and the finite-horizon phase classifier.
//!
//! Every estimator fans replicas out through [`crate::parallel::replicate`]
//! and reduces in replica order. Replica `r` draws its walk from the stream
//! `(seed, r, TAG_WALK)`; in annealed mode it also gets a fresh environment
//! seeded from `(seed, r, TAG_ENVIRONMENT)`, while quenched mode reuses the
//! environment handed in.
//!
//! The classifier reads four per-replica events off one trajectory of
//! `horizon` steps, with the late window `[horizon/2, horizon]`:
//!
//! | statistic              | replica counts when                          |
//! |------------------------|----------------------------------------------|
//! | `return_fraction`      | it revisits the start at some `n >= 1`       |
//! | `late_return_fraction` | it revisits the start inside the late window |
//! | `escape_fraction`      | `min (X_n - X_0).l` over the late window `>= escape_level` |
//! | `oscillation_fraction` | `min < -osc_level` and `max > +osc_level`    |
//!
//! and [`decide`] turns them into a verdict.

use serde::{Deserialize, Serialize};

use crate::environment::{Cookie, CookieStack, Delta, EnvironmentDistribution, SampledEnvironment};
use crate::error::{ErwError, Result};
use crate::lattice::{Direction, Lattice};
use crate::parallel::replicate;
use crate::rng::{next_unit, stream, stream_seed, TAG_ENVIRONMENT, TAG_WALK};
use crate::walk::{LineWalk, StopReason, StopRule, Walk, WalkOptions};

/// Two-sided 99% normal quantile.
pub const Z99: f64 = 2.575_829_303_548_901;
/// Half-width of the refusal band around `1/L`, relative to `1/L`.
pub const NEAR_CRITICAL_BAND: f64 = 0.1;
/// Acceptance distance in standard errors for every check.
pub const SIGMA_THRESHOLD: f64 = 3.0;
pub const DEFAULT_HORIZON: u64 = 1_000_000;
pub const DEFAULT_REPLICAS: u64 = 1_000;
/// Per-walk step budget for hitting-time experiments.
pub const DEFAULT_HIT_BUDGET: u64 = 1_000_000;

/// Mean, standard error and a 99% confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub replicas: u64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Estimate {
    /// Sample mean with a normal interval. Fewer than two samples give a
    /// zero standard error.
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Estimate { mean: f64::NAN, std_error: f64::NAN, replicas: 0, ci_low: f64::NAN, ci_high: f64::NAN };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let se = if n < 2 {
            0.0
        } else {
            let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
            (ss / (n - 1) as f64 / n as f64).sqrt()
        };
        Estimate { mean, std_error: se, replicas: n as u64, ci_low: mean - Z99 * se, ci_high: mean + Z99 * se }
    }

    /// Binomial proportion with the Wilson score interval.
    pub fn proportion(successes: u64, n: u64) -> Self {
        if n == 0 {
            return Estimate::from_samples(&[]);
        }
        let nf = n as f64;
        let p = successes as f64 / nf;
        let z2 = Z99 * Z99;
        let denom = 1.0 + z2 / nf;
        let center = (p + z2 / (2.0 * nf)) / denom;
        let half = Z99 * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
        Estimate {
            mean: p,
            std_error: (p * (1.0 - p) / nf).sqrt(),
            replicas: n,
            ci_low: (center - half).max(0.0).min(p),
            ci_high: (center + half).min(1.0).max(p),
        }
    }

    /// `|value - mean| <= k * std_error`.
    pub fn within_sigmas(&self, value: f64, k: f64) -> bool {
        (value - self.mean).abs() <= k * self.std_error
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Fresh environment per replica (the measure `P_0`).
    #[default]
    Annealed,
    /// One fixed environment, replicas over walk randomness only.
    Quenched,
}

/// Seed, replica count, worker count and averaging mode of one experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSpec {
    pub seed: u64,
    pub replicas: u64,
    pub jobs: usize,
    pub averaging: Averaging,
}

impl RunSpec {
    pub fn new(seed: u64, replicas: u64) -> Self {
        RunSpec { seed, replicas, jobs: 1, averaging: Averaging::Annealed }
    }

    pub fn jobs(mut self, jobs: usize) -> Self {
        self.jobs = jobs;
        self
    }

    pub fn averaging(mut self, averaging: Averaging) -> Self {
        self.averaging = averaging;
        self
    }

    /// The environment replica `replica` walks in.
    pub fn env_for(&self, env: &SampledEnvironment, replica: u64) -> SampledEnvironment {
        match self.averaging {
            Averaging::Quenched => env.clone(),
            Averaging::Annealed => env.reseeded(stream_seed(self.seed, replica, TAG_ENVIRONMENT)),
        }
    }

    /// Runs `f` on every replica and fails on the first error, by index.
    pub fn each<T, F>(&self, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(u64) -> Result<T> + Sync + Send,
    {
        replicate(self.replicas, self.jobs, f).into_iter().collect()
    }
}

/// The environment a run starts from: replica 0's draw under `seed`.
pub fn base_environment(dist: EnvironmentDistribution, seed: u64) -> Result<SampledEnvironment> {
    SampledEnvironment::new(dist, stream_seed(seed, 0, TAG_ENVIRONMENT))
}

/// What the classifier keeps from one trajectory. Projections are relative
/// to the start.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Trace {
    returns: u64,
    late_returns: u64,
    min: f64,
    max: f64,
    late_min: f64,
    sign_changes: u64,
    last: f64,
}

fn trace(env: &SampledEnvironment, horizon: u64, seed: u64, replica: u64) -> Result<Trace> {
    let mut rng = stream(seed, replica, TAG_WALK);
    let start = env.lattice().origin();
    let late_from = horizon / 2;
    let pre = late_from.saturating_sub(1);
    if env.lattice().line_width().is_some() {
        let mut w = LineWalk::new(env, &start)?;
        while w.time() < pre {
            w.step(next_unit(&mut rng))?;
        }
        let early = w.returns_to_start();
        let mut late_min = if late_from == 0 { 0 } else { i64::MAX };
        while w.time() < horizon {
            w.step(next_unit(&mut rng))?;
            late_min = late_min.min(w.displacement());
        }
        let x0 = start[0];
        return Ok(Trace {
            returns: w.returns_to_start(),
            late_returns: w.returns_to_start() - early,
            min: (w.min_proj() - x0) as f64,
            max: (w.max_proj() - x0) as f64,
            late_min: late_min as f64,
            sign_changes: w.sign_changes(),
            last: w.displacement() as f64,
        });
    }
    let mut w = Walk::new(env, &start)?;
    while w.state().time() < pre {
        w.step(next_unit(&mut rng))?;
    }
    let early = w.state().returns_to_start();
    let mut late_min = if late_from == 0 { 0.0 } else { f64::INFINITY };
    while w.state().time() < horizon {
        w.step(next_unit(&mut rng))?;
        late_min = late_min.min(w.state().displacement());
    }
    let s = w.state();
    let p0 = s.projection() - s.displacement();
    Ok(Trace {
        returns: s.returns_to_start(),
        late_returns: s.returns_to_start() - early,
        min: s.min_proj() - p0,
        max: s.max_proj() - p0,
        late_min,
        sign_changes: s.sign_changes(),
        last: s.displacement(),
    })
}

fn require_finite_delta(dist: &EnvironmentDistribution, allow_infinite: bool) -> Result<Delta> {
    let delta = dist.mean_delta();
    if !delta.is_finite() && !allow_infinite {
        return Err(ErwError::Refused("E[delta] is infinite (some stack has a drifting tail)".into()));
    }
    Ok(delta)
}

/// Fraction of replicas whose projection stays at or above `escape_level`
/// throughout `[horizon/2, horizon]`.
pub fn estimate_event_a(
    env: &SampledEnvironment,
    horizon: u64,
    escape_level: f64,
    run: &RunSpec,
    allow_infinite: bool,
) -> Result<Estimate> {
    require_finite_delta(env.distribution(), allow_infinite)?;
    let traces = run.each(|r| trace(&run.env_for(env, r), horizon, run.seed, r))?;
    let hits = traces.iter().filter(|t| t.late_min >= escape_level).count() as u64;
    Ok(Estimate::proportion(hits, run.replicas))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Transient,
    Recurrent,
    Inconclusive,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Transient => "Transient",
            Verdict::Recurrent => "Recurrent",
            Verdict::Inconclusive => "Inconclusive",
        })
    }
}

/// Decision thresholds of the classifier. These are calibration choices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub theta_t: f64,
    pub theta_r: f64,
    pub osc_level: f64,
    pub escape_level: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { theta_t: 0.95, theta_r: 0.95, osc_level: 50.0, escape_level: 50.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub return_fraction: f64,
    pub late_return_fraction: f64,
    pub escape_fraction: f64,
    pub oscillation_fraction: f64,
    /// Sign changes of the displacement per step, pooled over replicas.
    pub sign_change_rate: f64,
    /// Mean displacement divided by the horizon.
    pub speed_estimate: f64,
    pub min_proj: f64,
    pub max_proj: f64,
}

/// The decision table.
///
/// Transient needs `escape >= theta_t` and `late_return <= 1 - theta_t`.
/// Recurrent needs `return >= theta_r`, a positive sign-change rate and
/// `oscillation >= theta_r`. Both or neither give Inconclusive.
pub fn decide(e: &Evidence, t: &Thresholds) -> Verdict {
    let transient = e.escape_fraction >= t.theta_t && e.late_return_fraction <= 1.0 - t.theta_t;
    let recurrent = e.return_fraction >= t.theta_r && e.sign_change_rate > 0.0 && e.oscillation_fraction >= t.theta_r;
    match (transient, recurrent) {
        (true, false) => Verdict::Transient,
        (false, true) => Verdict::Recurrent,
        _ => Verdict::Inconclusive,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifyParams {
    pub horizon: u64,
    pub thresholds: Thresholds,
    /// Classify even inside the near-critical band.
    pub force: bool,
}

impl Default for ClassifyParams {
    fn default() -> Self {
        ClassifyParams { horizon: DEFAULT_HORIZON, thresholds: Thresholds::default(), force: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub verdict: Verdict,
    /// `None` when the point was not simulated (near-critical refusal).
    pub evidence: Option<Evidence>,
    pub mean_delta: f64,
    pub width: u32,
    pub horizon: u64,
    pub replicas: u64,
}

/// Threshold `1/L` and whether `mean_delta` sits inside the refusal band.
pub fn near_critical(mean_delta: f64, width: u32) -> bool {
    let crit = 1.0 / f64::from(width);
    (mean_delta - crit).abs() <= NEAR_CRITICAL_BAND * crit
}

fn classify_checked(env: &SampledEnvironment, run: &RunSpec) -> Result<(u32, f64)> {
    let lattice = env.lattice();
    let width = lattice.line_width().ok_or_else(|| {
        ErwError::Refused(format!("recurrence verdicts are only offered on Z and strips, got {lattice}"))
    })?;
    let mean_delta = require_finite_delta(env.distribution(), false)?.finite().unwrap_or(f64::INFINITY);
    if run.replicas == 0 {
        return Err(ErwError::Domain("classification needs at least one replica".into()));
    }
    Ok((width, mean_delta))
}

fn evidence(traces: &[Trace], horizon: u64, t: &Thresholds) -> Evidence {
    let n = traces.len() as f64;
    let frac = |f: &dyn Fn(&Trace) -> bool| traces.iter().filter(|x| f(x)).count() as f64 / n;
    let steps = n * horizon.max(1) as f64;
    Evidence {
        return_fraction: frac(&|x| x.returns > 0),
        late_return_fraction: frac(&|x| x.late_returns > 0),
        escape_fraction: frac(&|x| x.late_min >= t.escape_level),
        oscillation_fraction: frac(&|x| x.min < -t.osc_level && x.max > t.osc_level),
        sign_change_rate: traces.iter().map(|x| x.sign_changes as f64).sum::<f64>() / steps,
        speed_estimate: traces.iter().map(|x| x.last).sum::<f64>() / n / horizon.max(1) as f64,
        min_proj: traces.iter().map(|x| x.min).fold(f64::INFINITY, f64::min),
        max_proj: traces.iter().map(|x| x.max).fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Finite-horizon recurrence/transience verdict on `Z` or a strip.
pub fn classify(env: &SampledEnvironment, params: &ClassifyParams, run: &RunSpec) -> Result<ClassificationResult> {
    let (width, mean_delta) = classify_checked(env, run)?;
    if near_critical(mean_delta, width) && !params.force {
        return Err(ErwError::Refused(format!(
            "E[delta] = {mean_delta} is within {}% of the threshold 1/{width}; pass --force to classify anyway",
            NEAR_CRITICAL_BAND * 100.0
        )));
    }
    let traces = run.each(|r| trace(&run.env_for(env, r), params.horizon, run.seed, r))?;
    let ev = evidence(&traces, params.horizon, &params.thresholds);
    Ok(ClassificationResult {
        verdict: decide(&ev, &params.thresholds),
        evidence: Some(ev),
        mean_delta,
        width,
        horizon: params.horizon,
        replicas: run.replicas,
    })
}

/// One-parameter environment families for sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvironmentFamily {
    /// `delta(t) = t`: the drift `t` is split into `ceil(t / max_cookie_drift)`
    /// equal cookies, each `base` with `a/2` moved from `-e1` to `+e1`,
    /// followed by the drift-free tail `base`.
    DriftLadder { lattice: Lattice, kappa: f64, base: Cookie, max_cookie_drift: f64 },
}

impl EnvironmentFamily {
    pub fn lattice(&self) -> &Lattice {
        match self {
            EnvironmentFamily::DriftLadder { lattice, .. } => lattice,
        }
    }

    pub fn at(&self, t: f64) -> Result<EnvironmentDistribution> {
        let EnvironmentFamily::DriftLadder { lattice, kappa, base, max_cookie_drift } = self;
        lattice.check()?;
        let dir = Direction::e1(lattice.dim());
        if base.drift(&dir).abs() > 1e-12 {
            return Err(ErwError::Config("family base cookie must have zero drift along e1".into()));
        }
        if !(t >= 0.0 && t.is_finite()) {
            return Err(ErwError::Domain(format!("family parameter {t} must be finite and >= 0")));
        }
        if max_cookie_drift.is_nan() || *max_cookie_drift <= 0.0 {
            return Err(ErwError::Config("max_cookie_drift must be positive".into()));
        }
        let count = if t == 0.0 { 0 } else { (t / max_cookie_drift - 1e-12).ceil().max(1.0) as usize };
        let mut probs = base.probs.clone();
        if count > 0 {
            let a = t / count as f64;
            probs[0] += a / 2.0;
            probs[1] -= a / 2.0;
        }
        let stack = CookieStack::new(vec![Cookie::new(probs); count], base.clone());
        let dist = EnvironmentDistribution::degenerate(*lattice, dir, *kappa, stack);
        dist.check()?;
        Ok(dist)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub t: f64,
    pub result: ClassificationResult,
    pub flag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub warnings: Vec<String>,
}

/// Classifies the family at every grid point, in grid order.
///
/// Points inside the near-critical band become Inconclusive rows flagged
/// `near-critical` unless `params.force` is set.
pub fn sweep(family: &EnvironmentFamily, grid: &[f64], params: &ClassifyParams, run: &RunSpec) -> Result<SweepReport> {
    let mut rows = Vec::with_capacity(grid.len());
    let mut warnings = Vec::new();
    let mut seen: Vec<(f64, f64)> = Vec::new();
    for &t in grid {
        let dist = family.at(t)?;
        let env = base_environment(dist, run.seed)?;
        let (width, mean_delta) = classify_checked(&env, run)?;
        warnings.extend(monotonicity_warning(&seen, t, mean_delta));
        seen.push((t, mean_delta));
        let critical = near_critical(mean_delta, width);
        let row = if critical && !params.force {
            SweepRow {
                t,
                result: ClassificationResult {
                    verdict: Verdict::Inconclusive,
                    evidence: None,
                    mean_delta,
                    width,
                    horizon: params.horizon,
                    replicas: run.replicas,
                },
                flag: Some("near-critical".into()),
            }
        } else {
            let forced = ClassifyParams { force: true, ..*params };
            SweepRow { t, result: classify(&env, &forced, run)?, flag: critical.then(|| "near-critical".into()) }
        };
        rows.push(row);
    }
    Ok(SweepReport { rows, warnings })
}

/// A warning when `(t, mean_delta)` breaks strict monotonicity against an
/// earlier grid point.
fn monotonicity_warning(seen: &[(f64, f64)], t: f64, mean_delta: f64) -> Option<String> {
    seen.iter()
        .find(|&&(s, m)| (s < t && m >= mean_delta) || (s > t && m <= mean_delta))
        .map(|&(s, m)| format!("family is not monotone: mean_delta({s}) = {m}, mean_delta({t}) = {mean_delta}"))
}

/// Fixed header of classification tables.
pub const CLASSIFICATION_HEADER: &str = "t,mean_delta,width,horizon,replicas,verdict,flag,return_fraction,\
late_return_fraction,escape_fraction,oscillation_fraction,sign_change_rate,speed_estimate,min_proj,max_proj";

fn num(x: f64) -> String {
    format!("{x}")
}

impl ClassificationResult {
    /// One CSV line under [`CLASSIFICATION_HEADER`]; `t` may be blank.
    pub fn csv_row(&self, t: Option<f64>, flag: Option<&str>) -> String {
        let mut cells = vec![
            t.map(num).unwrap_or_default(),
            num(self.mean_delta),
            self.width.to_string(),
            self.horizon.to_string(),
            self.replicas.to_string(),
            self.verdict.to_string(),
            flag.unwrap_or_default().to_string(),
        ];
        match &self.evidence {
            Some(e) => cells.extend(
                [
                    e.return_fraction,
                    e.late_return_fraction,
                    e.escape_fraction,
                    e.oscillation_fraction,
                    e.sign_change_rate,
                    e.speed_estimate,
                    e.min_proj,
                    e.max_proj,
                ]
                .map(num),
            ),
            None => cells.extend(std::iter::repeat_n(String::new(), 8)),
        }
        cells.join(",")
    }
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CLASSIFICATION_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.result.csv_row(Some(row.t), row.flag.as_deref()));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZScore {
    pub n: u64,
    pub estimate: Estimate,
    pub z: f64,
}

impl ZScore {
    pub fn passes(&self) -> bool {
        self.z.abs() <= SIGMA_THRESHOLD
    }
}

fn z_of(e: &Estimate) -> f64 {
    if e.std_error > 0.0 {
        e.mean / e.std_error
    } else if e.mean == 0.0 {
        0.0
    } else {
        e.mean.signum() * f64::INFINITY
    }
}

/// Quenched z-scores of `M_n` at every `n` in `n_list`.
///
/// `index_shift` is the mis-indexing harness of [`WalkOptions`]; any value
/// other than 0 breaks the bookkeeping on purpose.
pub fn martingale_test(
    env: &SampledEnvironment,
    n_list: &[u64],
    seed: u64,
    replicas: u64,
    jobs: usize,
    index_shift: u64,
) -> Result<Vec<ZScore>> {
    let mut ns = n_list.to_vec();
    ns.sort_unstable();
    ns.dedup();
    let Some(&n_max) = ns.last() else {
        return Ok(Vec::new());
    };
    let run = RunSpec::new(seed, replicas).jobs(jobs).averaging(Averaging::Quenched);
    let opts = WalkOptions { cookie_index_shift: index_shift, ..WalkOptions::default() };
    let start = env.lattice().origin();
    let samples = run.each(|r| {
        let mut rng = stream(seed, r, TAG_WALK);
        let mut w = Walk::with_options(env, &start, &opts)?;
        let mut out = Vec::with_capacity(ns.len());
        let mut next = 0;
        while next < ns.len() && ns[next] == 0 {
            out.push(0.0);
            next += 1;
        }
        while w.state().time() < n_max {
            w.step(next_unit(&mut rng))?;
            while next < ns.len() && ns[next] == w.state().time() {
                out.push(w.state().mart());
                next += 1;
            }
        }
        Ok(out)
    })?;
    Ok(ns
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let column: Vec<f64> = samples.iter().map(|s| s[k]).collect();
            let estimate = Estimate::from_samples(&column);
            ZScore { n, estimate, z: z_of(&estimate) }
        })
        .collect())
}

pub const MARTINGALE_HEADER: &str = "n,mean,std_error,replicas,ci_low,ci_high,z,pass";

pub fn martingale_csv(scores: &[ZScore]) -> String {
    let mut out = String::from(MARTINGALE_HEADER);
    out.push('\n');
    for s in scores {
        let e = &s.estimate;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            s.n,
            num(e.mean),
            num(e.std_error),
            e.replicas,
            num(e.ci_low),
            num(e.ci_high),
            num(s.z),
            s.passes()
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeatusRow {
    pub x: u64,
    /// `D_{T_x}` over the replicas that reached level `x`.
    pub estimate: Estimate,
    pub reached: u64,
    /// Replicas that ran out of budget first; they bias the mean downward.
    pub unreached: u64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeatusReport {
    pub rows: Vec<BeatusRow>,
    pub budget: u64,
}

impl BeatusReport {
    pub fn passes(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,bound,mean,std_error,ci_low,ci_high,reached,unreached,budget,pass\n");
        for r in &self.rows {
            let e = &r.estimate;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.x,
                r.x + 1,
                num(e.mean),
                num(e.std_error),
                num(e.ci_low),
                num(e.ci_high),
                r.reached,
                r.unreached,
                self.budget,
                r.pass
            ));
        }
        out
    }
}

/// Absorbed drift at the first time the projection gains `x`, for every
/// `x` in `x_list`, in one fixed environment. PASS iff
/// `mean - 3 SE <= x + 1`.
pub fn beatus_check(
    env: &SampledEnvironment,
    x_list: &[u64],
    seed: u64,
    replicas: u64,
    jobs: usize,
    budget: u64,
) -> Result<BeatusReport> {
    let mut xs = x_list.to_vec();
    xs.sort_unstable();
    xs.dedup();
    if xs.is_empty() {
        return Ok(BeatusReport { rows: Vec::new(), budget });
    }
    let run = RunSpec::new(seed, replicas).jobs(jobs).averaging(Averaging::Quenched);
    let start = env.lattice().origin();
    let samples = run.each(|r| {
        let mut rng = stream(seed, r, TAG_WALK);
        let mut w = Walk::new(env, &start)?;
        let mut out: Vec<Option<f64>> = vec![None; xs.len()];
        let mut next = 0;
        loop {
            let s = w.state();
            while next < xs.len() && s.displacement() >= xs[next] as f64 {
                out[next] = Some(s.drift_total());
                next += 1;
            }
            if next == xs.len() || s.time() >= budget {
                break;
            }
            w.step(next_unit(&mut rng))?;
        }
        Ok(out)
    })?;
    let rows = xs
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            let reached: Vec<f64> = samples.iter().filter_map(|s| s[k]).collect();
            let estimate = Estimate::from_samples(&reached);
            let n = reached.len() as u64;
            let pass = n > 0 && estimate.mean - SIGMA_THRESHOLD * estimate.std_error <= (x + 1) as f64;
            BeatusRow { x, estimate, reached: n, unreached: replicas - n, pass }
        })
        .collect();
    Ok(BeatusReport { rows, budget })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HittingEstimate {
    /// Proportion absorbed on the right among all replicas.
    pub estimate: Estimate,
    /// Replicas still inside the window when the budget ran out.
    pub unabsorbed: u64,
}

/// Monte Carlo `P[T_k < T_{-i}]`: absorption at projection `>= right`
/// before `<= -left`.
pub fn estimate_hitting(
    env: &SampledEnvironment,
    start: &[i64],
    left: i64,
    right: i64,
    run: &RunSpec,
    budget: u64,
) -> Result<HittingEstimate> {
    let rule = StopRule {
        max_steps: budget,
        hit_right: Some(right as f64),
        hit_left: Some(-left as f64),
        stop_on_return: false,
    };
    let reasons = run.each(|r| {
        let env = run.env_for(env, r);
        let mut rng = stream(run.seed, r, TAG_WALK);
        Ok(Walk::new(&env, start)?.run(&mut rng, &rule)?.stop_reason)
    })?;
    let right_hits = reasons.iter().filter(|&&s| s == StopReason::HitRight).count() as u64;
    let unabsorbed = reasons.iter().filter(|&&s| s == StopReason::Budget).count() as u64;
    Ok(HittingEstimate { estimate: Estimate::proportion(right_hits, run.replicas), unabsorbed })
}

pub const ESTIMATE_HEADER: &str = "quantity,mean,std_error,replicas,ci_low,ci_high";

impl Estimate {
    pub fn csv_row(&self, quantity: &str) -> String {
        format!(
            "{quantity},{},{},{},{},{}",
            num(self.mean),
            num(self.std_error),
            self.replicas,
            num(self.ci_low),
            num(self.ci_high)
        )
    }
}
