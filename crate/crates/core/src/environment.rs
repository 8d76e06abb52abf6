//! Cookie stacks, i.i.d. environment laws, and sampled environments.
//!
//! A site's cookie stack is a finite prefix followed by one tail cookie
//! repeated forever. A [`SampledEnvironment`] never stores the lattice: the
//! stack at a site is drawn on demand from the support of the law by
//! hashing `(seed, coordinates)`. Consumed cookies (the leftover operator)
//! and spatial shifts are layered on top as a sparse overlay.

use std::collections::HashMap;
use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{ErwError, Result};
use crate::lattice::{Direction, Lattice, Site};
use crate::rng::{site_uniform, MixBuildHasher};
use crate::walk::{StopReason, StopRule, Walk};

/// Tolerance for probability sums and for treating a drift as zero.
pub const PROB_TOLERANCE: f64 = 1e-12;

/// Default step cap for a single draw from the kernel `R`.
pub const DEFAULT_R_BUDGET: u64 = 1_000_000_000;

/// One transition vector, indexed by the canonical direction order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Cookie {
    pub probs: Vec<f64>,
}

impl Cookie {
    pub fn new(probs: Vec<f64>) -> Self {
        Cookie { probs }
    }

    /// Uniform cookie on `slots` directions.
    pub fn uniform(slots: usize) -> Self {
        Cookie { probs: vec![1.0 / slots as f64; slots] }
    }

    /// The Benjamini-Wilson first cookie: `1/(2d) +- eps` on `+-e_1`.
    pub fn bw_first(dim: usize, eps: f64) -> Self {
        let base = 1.0 / (2 * dim) as f64;
        let mut probs = vec![base; 2 * dim];
        probs[0] += eps;
        probs[1] -= eps;
        Cookie { probs }
    }

    /// `sum_e probs[e] (e.l)`.
    pub fn drift(&self, dir: &Direction) -> f64 {
        self.probs.iter().enumerate().map(|(slot, p)| p * dir.slot_gain(slot)).sum()
    }
}

/// Total drift of a stack: finite, or infinite when the tail drifts.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub enum Delta {
    Finite(f64),
    Infinite,
}

impl Delta {
    pub fn finite(self) -> Option<f64> {
        match self {
            Delta::Finite(v) => Some(v),
            Delta::Infinite => None,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Delta::Finite(_))
    }
}

impl std::fmt::Display for Delta {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Delta::Finite(v) => write!(f, "{v}"),
            Delta::Infinite => write!(f, "inf"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CookieStack {
    pub prefix: Vec<Cookie>,
    pub tail: Cookie,
}

impl CookieStack {
    pub fn new(prefix: Vec<Cookie>, tail: Cookie) -> Self {
        CookieStack { prefix, tail }
    }

    pub fn uniform(slots: usize) -> Self {
        CookieStack { prefix: Vec::new(), tail: Cookie::uniform(slots) }
    }

    /// `count` copies of `cookie` followed by a uniform tail.
    pub fn repeated(cookie: Cookie, count: usize) -> Self {
        let slots = cookie.probs.len();
        CookieStack { prefix: vec![cookie; count], tail: Cookie::uniform(slots) }
    }

    /// The stack seen after `offset` cookies have been eaten.
    pub fn consumed(&self, offset: usize) -> CookieStack {
        CookieStack { prefix: self.prefix.iter().skip(offset).cloned().collect(), tail: self.tail.clone() }
    }

    /// Cookie for the `visit`-th visit (1-based) after `offset` consumed cookies.
    pub fn cookie(&self, visit: usize, offset: usize) -> &Cookie {
        self.prefix.get(visit - 1 + offset).unwrap_or(&self.tail)
    }

    /// Total drift `delta` of the stack in direction `dir`.
    pub fn delta(&self, dir: &Direction) -> Delta {
        if self.tail.drift(dir).abs() > PROB_TOLERANCE {
            return Delta::Infinite;
        }
        Delta::Finite(self.prefix.iter().map(|c| c.drift(dir)).sum())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CookieSlot {
    Prefix(usize),
    Tail,
}

/// Where a violation was found.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationSite {
    Kappa,
    Support,
    Entry { support: usize },
    Cookie { support: usize, cookie: CookieSlot },
}

impl std::fmt::Display for ViolationSite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ViolationSite::Kappa => write!(f, "kappa"),
            ViolationSite::Support => write!(f, "support"),
            ViolationSite::Entry { support } => write!(f, "support[{support}]"),
            ViolationSite::Cookie { support, cookie: CookieSlot::Prefix(i) } => {
                write!(f, "support[{support}].prefix[{i}]")
            }
            ViolationSite::Cookie { support, cookie: CookieSlot::Tail } => {
                write!(f, "support[{support}].tail")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub site: ViolationSite,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.site, self.message)
    }
}

/// Checks one cookie against the environment-space constraints.
pub fn cookie_violations(cookie: &Cookie, slots: usize, kappa: f64, dir: &Direction) -> Vec<String> {
    let mut out = Vec::new();
    if cookie.probs.len() != slots {
        out.push(format!("has {} entries, expected {slots}", cookie.probs.len()));
        return out;
    }
    for (slot, &p) in cookie.probs.iter().enumerate() {
        if !p.is_finite() {
            out.push(format!("entry {slot} is not finite"));
        } else if p < kappa - PROB_TOLERANCE {
            out.push(format!("entry {slot} = {p} < kappa = {kappa}"));
        } else if p > 1.0 - kappa + PROB_TOLERANCE {
            out.push(format!("entry {slot} = {p} > 1 - kappa = {}", 1.0 - kappa));
        }
    }
    let sum: f64 = cookie.probs.iter().sum();
    if (sum - 1.0).abs() > PROB_TOLERANCE {
        out.push(format!("entries sum to {sum}, expected 1"));
    }
    let drift = cookie.drift(dir);
    if drift < -PROB_TOLERANCE {
        out.push(format!("drift {drift} < 0"));
    }
    out
}

/// An i.i.d. law on cookie stacks with finite support.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentDistribution {
    pub lattice: Lattice,
    pub direction: Direction,
    pub kappa: f64,
    pub support: Vec<(CookieStack, f64)>,
}

impl EnvironmentDistribution {
    pub fn new(lattice: Lattice, direction: Direction, kappa: f64, support: Vec<(CookieStack, f64)>) -> Self {
        EnvironmentDistribution { lattice, direction, kappa, support }
    }

    /// Law putting all mass on `stack`.
    pub fn degenerate(lattice: Lattice, direction: Direction, kappa: f64, stack: CookieStack) -> Self {
        Self::new(lattice, direction, kappa, vec![(stack, 1.0)])
    }

    /// Every violated invariant; empty means valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let slots = self.lattice.slots();
        let max_kappa = 1.0 / slots as f64;
        if let Err(e) = self.lattice.check() {
            out.push(Violation { site: ViolationSite::Support, message: e.to_string() });
        }
        if self.direction.dim() != self.lattice.dim() {
            out.push(Violation {
                site: ViolationSite::Support,
                message: format!(
                    "direction has {} entries, lattice needs {}",
                    self.direction.dim(),
                    self.lattice.dim()
                ),
            });
            return out;
        }
        if !(self.kappa > 0.0 && self.kappa <= max_kappa + PROB_TOLERANCE) {
            out.push(Violation {
                site: ViolationSite::Kappa,
                message: format!("kappa = {} outside (0, 1/(2d)] = (0, {max_kappa}]", self.kappa),
            });
        }
        if self.support.is_empty() {
            out.push(Violation { site: ViolationSite::Support, message: "empty support".into() });
        }
        let mut total = 0.0;
        for (k, (stack, p)) in self.support.iter().enumerate() {
            if !(0.0..=1.0).contains(p) {
                out.push(Violation {
                    site: ViolationSite::Entry { support: k },
                    message: format!("probability {p} outside [0, 1]"),
                });
            }
            total += p;
            let cookies = stack
                .prefix
                .iter()
                .enumerate()
                .map(|(i, c)| (CookieSlot::Prefix(i), c))
                .chain(std::iter::once((CookieSlot::Tail, &stack.tail)));
            for (slot, cookie) in cookies {
                for message in cookie_violations(cookie, slots, self.kappa, &self.direction) {
                    out.push(Violation { site: ViolationSite::Cookie { support: k, cookie: slot }, message });
                }
            }
        }
        if !self.support.is_empty() && (total - 1.0).abs() > PROB_TOLERANCE {
            out.push(Violation {
                site: ViolationSite::Support,
                message: format!("probabilities sum to {total}, expected 1"),
            });
        }
        out
    }

    /// `Ok(())` or a config error listing every violation.
    pub fn check(&self) -> Result<()> {
        let violations = self.validate();
        if violations.is_empty() {
            Ok(())
        } else {
            let text: Vec<String> = violations.iter().map(ToString::to_string).collect();
            Err(ErwError::Environment(text.join("; ")))
        }
    }

    /// `E[delta^0]`; infinite if any stack with positive mass has a drifting tail.
    pub fn mean_delta(&self) -> Delta {
        let mut sum = 0.0;
        for (stack, p) in &self.support {
            if *p <= 0.0 {
                continue;
            }
            match stack.delta(&self.direction) {
                Delta::Finite(v) => sum += p * v,
                Delta::Infinite => return Delta::Infinite,
            }
        }
        Delta::Finite(sum)
    }
}

/// Flattened cookie stack used by the walk engine.
#[derive(Debug, Clone)]
pub(crate) struct CompiledStack {
    slots: usize,
    prefix_len: usize,
    /// Row `r` holds the running sums of cookie `r` (row `prefix_len` is the tail).
    cdf: Vec<f64>,
    drift: Vec<f64>,
}

impl CompiledStack {
    pub(crate) fn new(stack: &CookieStack, dir: &Direction) -> Self {
        let slots = stack.tail.probs.len();
        let mut cdf = Vec::with_capacity((stack.prefix.len() + 1) * slots);
        let mut drift = Vec::with_capacity(stack.prefix.len() + 1);
        for cookie in stack.prefix.iter().chain(std::iter::once(&stack.tail)) {
            let mut acc = 0.0;
            for &p in &cookie.probs {
                acc += p;
                cdf.push(acc);
            }
            drift.push(cookie.drift(dir));
        }
        CompiledStack { slots, prefix_len: stack.prefix.len(), cdf, drift }
    }

    /// Row for a 0-based cookie index, clamped to the tail.
    #[inline]
    pub(crate) fn row(&self, index: u64) -> usize {
        index.min(self.prefix_len as u64) as usize
    }

    pub(crate) fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    /// Running sums of every row, the tail last.
    pub(crate) fn cdf_rows(&self) -> &[f64] {
        &self.cdf
    }

    pub(crate) fn drifts(&self) -> &[f64] {
        &self.drift
    }

    #[inline]
    pub(crate) fn drift(&self, row: usize) -> f64 {
        self.drift[row]
    }

    /// Inverse-CDF choice of a direction slot for uniform `u`.
    #[inline]
    pub(crate) fn choose(&self, row: usize, u: f64) -> usize {
        let cdf = &self.cdf[row * self.slots..(row + 1) * self.slots];
        // branch-free count of running sums at or below u
        let passed: usize = cdf.iter().map(|&c| usize::from(u >= c)).sum();
        passed.min(self.slots - 1)
    }
}

/// Per-site overlay entry, keyed by base (unshifted) coordinates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SiteOverlay {
    /// Index into the environment's override stacks.
    pub stack: Option<u32>,
    /// Number of cookies already consumed.
    pub offset: u64,
}

type OverlayMap = HashMap<Site, SiteOverlay, MixBuildHasher>;

#[derive(Debug)]
struct Compiled {
    dist: EnvironmentDistribution,
    support_cdf: Vec<f64>,
    stacks: Vec<CompiledStack>,
}

/// A quenched environment: a law, a seed, and a sparse overlay.
///
/// The stack at base site `b` is a pure function of `(seed, b)` unless the
/// overlay overrides it. Viewing the environment at site `x` reads base site
/// `x + translation`.
#[derive(Debug, Clone)]
pub struct SampledEnvironment {
    base: Arc<Compiled>,
    seed: u64,
    translation: Site,
    overlay: Arc<OverlayMap>,
    overrides: Arc<Vec<(CookieStack, CompiledStack)>>,
}

/// Resolved per-site data for the walk engine.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ResolvedSite {
    pub stack: u32,
    pub offset: u64,
}

impl SampledEnvironment {
    /// Validates `dist` and binds it to `seed`.
    pub fn new(dist: EnvironmentDistribution, seed: u64) -> Result<Self> {
        dist.check()?;
        let mut support_cdf = Vec::with_capacity(dist.support.len());
        let mut acc = 0.0;
        for (_, p) in &dist.support {
            acc += p;
            support_cdf.push(acc);
        }
        let stacks = dist.support.iter().map(|(s, _)| CompiledStack::new(s, &dist.direction)).collect();
        let translation = dist.lattice.origin();
        Ok(SampledEnvironment {
            base: Arc::new(Compiled { dist, support_cdf, stacks }),
            seed,
            translation,
            overlay: Arc::new(OverlayMap::default()),
            overrides: Arc::new(Vec::new()),
        })
    }

    /// Same law and overlay structure, different seed, empty overlay.
    pub fn reseeded(&self, seed: u64) -> Self {
        SampledEnvironment {
            base: Arc::clone(&self.base),
            seed,
            translation: self.lattice().origin(),
            overlay: Arc::new(OverlayMap::default()),
            overrides: Arc::new(Vec::new()),
        }
    }

    pub fn distribution(&self) -> &EnvironmentDistribution {
        &self.base.dist
    }

    pub fn lattice(&self) -> &Lattice {
        &self.base.dist.lattice
    }

    pub fn direction(&self) -> &Direction {
        &self.base.dist.direction
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn translation(&self) -> &[i64] {
        &self.translation
    }

    /// True when no overlay or shift is active.
    pub fn is_pristine(&self) -> bool {
        self.overlay.is_empty() && self.translation.iter().all(|&c| c == 0)
    }

    fn base_site(&self, site: &[i64]) -> Result<Site> {
        self.lattice().validate_site(site)?;
        self.lattice().translate(site, &self.translation)
    }

    fn support_index(&self, base: &[i64]) -> usize {
        let u = site_uniform(self.seed, base);
        let cdf = &self.base.support_cdf;
        match cdf.iter().position(|&c| u < c) {
            Some(k) => k,
            // rounding left a sliver above the last running sum
            None => self.base.dist.support.iter().rposition(|(_, p)| *p > 0.0).unwrap_or(0),
        }
    }

    /// Stack index and consumed-count offset at a base site.
    #[inline]
    pub(crate) fn resolve_base(&self, base: &[i64]) -> ResolvedSite {
        let over = if self.overlay.is_empty() { None } else { self.overlay.get(base).copied() };
        match over {
            Some(SiteOverlay { stack: Some(j), offset }) => {
                ResolvedSite { stack: self.base.stacks.len() as u32 + j, offset }
            }
            Some(SiteOverlay { stack: None, offset }) => {
                ResolvedSite { stack: self.support_index(base) as u32, offset }
            }
            None => ResolvedSite { stack: self.support_index(base) as u32, offset: 0 },
        }
    }

    /// Number of compiled stacks, support first, then overrides.
    pub(crate) fn stack_count(&self) -> usize {
        self.base.stacks.len() + self.overrides.len()
    }

    #[inline]
    pub(crate) fn compiled(&self, stack: u32) -> &CompiledStack {
        let n = self.base.stacks.len();
        let j = stack as usize;
        if j < n {
            &self.base.stacks[j]
        } else {
            &self.overrides[j - n].1
        }
    }

    /// Resolves a viewed site (already reduced for strips) without validation.
    #[inline]
    pub(crate) fn resolve_viewed(&self, site: &[i64], scratch: &mut Vec<i64>) -> ResolvedSite {
        if self.translation.iter().all(|&c| c == 0) {
            return self.resolve_base(site);
        }
        scratch.clear();
        scratch.extend(site.iter().zip(&self.translation).map(|(a, b)| a.wrapping_add(*b)));
        if let Lattice::Strip { width } = *self.lattice() {
            scratch[1] = scratch[1].rem_euclid(i64::from(width));
        }
        self.resolve_base(scratch)
    }

    /// The cookie stack at `site` (ignoring consumed cookies).
    pub fn site_stack(&self, site: &[i64]) -> Result<CookieStack> {
        let base = self.base_site(site)?;
        let r = self.resolve_base(&base);
        Ok(self.stack_source(r.stack).clone())
    }

    fn stack_source(&self, stack: u32) -> &CookieStack {
        let n = self.base.stacks.len();
        let j = stack as usize;
        if j < n {
            &self.base.dist.support[j].0
        } else {
            &self.overrides[j - n].0
        }
    }

    /// Number of cookies already consumed at `site`.
    pub fn offset(&self, site: &[i64]) -> Result<u64> {
        let base = self.base_site(site)?;
        Ok(self.overlay.get(&base).map_or(0, |o| o.offset))
    }

    /// Remaining stack at `site` once consumed cookies are dropped.
    pub fn effective_stack(&self, site: &[i64]) -> Result<CookieStack> {
        let offset = self.offset(site)?;
        Ok(self.site_stack(site)?.consumed(offset as usize))
    }

    /// Cookie used on the `visit`-th visit (1-based) to `site`.
    pub fn cookie_at(&self, site: &[i64], visit: u64) -> Result<Cookie> {
        if visit < 1 {
            return Err(ErwError::Domain("visit index must be >= 1".into()));
        }
        let base = self.base_site(site)?;
        let r = self.resolve_base(&base);
        let stack = self.stack_source(r.stack);
        let idx = (visit - 1).saturating_add(r.offset);
        Ok(usize::try_from(idx).ok().and_then(|i| stack.prefix.get(i)).unwrap_or(&stack.tail).clone())
    }

    /// Replaces the stack at `site`; the stack must satisfy the law's constraints.
    pub fn with_stack(&self, site: &[i64], stack: CookieStack) -> Result<Self> {
        let dist = self.distribution();
        let slots = dist.lattice.slots();
        for cookie in stack.prefix.iter().chain(std::iter::once(&stack.tail)) {
            let v = cookie_violations(cookie, slots, dist.kappa, &dist.direction);
            if !v.is_empty() {
                return Err(ErwError::Environment(format!("override at {site:?}: {}", v.join("; "))));
            }
        }
        let base = self.base_site(site)?;
        let mut out = self.clone();
        let compiled = CompiledStack::new(&stack, &dist.direction);
        let overrides = Arc::make_mut(&mut out.overrides);
        overrides.push((stack, compiled));
        let j = (overrides.len() - 1) as u32;
        Arc::make_mut(&mut out.overlay).entry(base).or_default().stack = Some(j);
        Ok(out)
    }

    /// Adds consumed-cookie counts given as `(viewed site, count)` pairs.
    pub fn with_consumed<'a, I>(&self, counts: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a [i64], u64)>,
    {
        let mut out = self.clone();
        let overlay = Arc::make_mut(&mut out.overlay);
        for (site, count) in counts {
            if count == 0 {
                continue;
            }
            let base = self.base_site(site)?;
            let entry = overlay.entry(base).or_default();
            entry.offset = entry.offset.saturating_add(count);
        }
        Ok(out)
    }

    /// The leftover environment after the walk followed `path`: each site
    /// loses one cookie per visit at times `0..m-1`; the final visit to
    /// `x_m` is not counted.
    pub fn leftover(&self, path: &[Site]) -> Result<Self> {
        let lattice = self.lattice();
        for w in path.windows(2) {
            if !lattice.adjacent(&w[0], &w[1]) {
                return Err(ErwError::Domain(format!("path step {:?} -> {:?} is not nearest-neighbor", w[0], w[1])));
            }
        }
        if let Some(last) = path.last() {
            lattice.validate_site(last)?;
        }
        let mut counts: HashMap<&[i64], u64> = HashMap::new();
        for site in path.iter().take(path.len().saturating_sub(1)) {
            *counts.entry(site.as_slice()).or_insert(0) += 1;
        }
        let mut ordered: Vec<(&[i64], u64)> = counts.into_iter().collect();
        ordered.sort();
        self.with_consumed(ordered)
    }

    /// The environment viewed from `z`: `shift(z)` at `x` equals `self` at `x + z`.
    pub fn shift(&self, z: &[i64]) -> Result<Self> {
        if z.len() != self.lattice().dim() {
            return Err(ErwError::Domain("shift dimension mismatch".into()));
        }
        let mut out = self.clone();
        out.translation = self.lattice().translate(&self.translation, z)?;
        Ok(out)
    }

    /// One draw from the kernel `R`: walk from the origin until the
    /// projection first reaches 1, eat the cookies used on the way, and
    /// re-centre the environment at the walker.
    pub fn sample_r<R: RngCore>(&self, rng: &mut R, budget: u64) -> Result<Self> {
        let start = self.lattice().origin();
        let walk = Walk::new(self, &start)?;
        let rule = StopRule { max_steps: budget, hit_right: Some(1.0), ..StopRule::default() };
        let summary = walk.run(rng, &rule)?;
        if summary.stop_reason != StopReason::HitRight {
            return Err(ErwError::Timeout { budget });
        }
        let state = &summary.state;
        let end = state.position().to_vec();
        let counts: Vec<(Site, u64)> = state
            .visit_counts()
            .map(|(site, c)| {
                let c = if site == end { c - 1 } else { c };
                (site, c)
            })
            .collect();
        self.with_consumed(counts.iter().map(|(s, c)| (s.as_slice(), *c)))?.shift(&end)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn z_dist(kappa: f64, prefix: Vec<Cookie>) -> EnvironmentDistribution {
        EnvironmentDistribution::degenerate(
            Lattice::z(),
            Direction::e1(1),
            kappa,
            CookieStack::new(prefix, Cookie::uniform(2)),
        )
    }

    #[test]
    fn validate_accepts_and_rejects() {
        let ok = z_dist(0.25, vec![Cookie::new(vec![0.75, 0.25])]);
        assert!(ok.validate().is_empty());

        let high = z_dist(0.25, vec![Cookie::new(vec![0.8, 0.2])]);
        let v = high.validate();
        assert!(v.iter().any(|x| x.message.contains("0.8 > 1 - kappa")), "{v:?}");
        assert_eq!(v[0].site, ViolationSite::Cookie { support: 0, cookie: CookieSlot::Prefix(0) });

        let neg = z_dist(0.25, vec![Cookie::new(vec![0.4, 0.6])]);
        let v = neg.validate();
        assert_eq!(v.len(), 1);
        assert!(v[0].message.contains("drift"), "{v:?}");
        assert!(v[0].message.contains("< 0"), "{v:?}");
    }

    #[test]
    fn validate_reports_kappa_and_support_sum() {
        let mut d = z_dist(0.6, vec![]);
        d.support[0].1 = 0.5;
        let v = d.validate();
        assert!(v.iter().any(|x| x.site == ViolationSite::Kappa));
        assert!(v.iter().any(|x| x.message.contains("sum to 0.5")));
    }

    #[test]
    fn delta_values() {
        let bw = CookieStack::new(vec![Cookie::bw_first(2, 0.1)], Cookie::uniform(4));
        let d = bw.delta(&Direction::e1(2)).finite().unwrap();
        assert!((d - 0.2).abs() < 1e-15);
        assert_eq!(CookieStack::uniform(4).delta(&Direction::e1(2)), Delta::Finite(0.0));
        let three = CookieStack::repeated(Cookie::new(vec![0.75, 0.25]), 3);
        assert_eq!(three.delta(&Direction::e1(1)), Delta::Finite(1.5));
        let drifting = CookieStack::new(vec![], Cookie::new(vec![0.75, 0.25]));
        assert_eq!(drifting.delta(&Direction::e1(1)), Delta::Infinite);
    }

    #[test]
    fn mean_delta_values() {
        let dir = Direction::e1(1);
        let a = CookieStack::repeated(Cookie::new(vec![0.8, 0.2]), 1);
        let b = CookieStack::repeated(Cookie::new(vec![0.6, 0.4]), 1);
        let d = EnvironmentDistribution::new(Lattice::z(), dir.clone(), 0.2, vec![(a.clone(), 0.5), (b, 0.5)]);
        assert!((d.mean_delta().finite().unwrap() - 0.4).abs() < 1e-15);
        let deg = z_dist(0.25, vec![Cookie::new(vec![0.75, 0.25]); 3]);
        assert_eq!(deg.mean_delta(), Delta::Finite(1.5));
        let inf = CookieStack::new(vec![], Cookie::new(vec![0.6, 0.4]));
        let d = EnvironmentDistribution::new(Lattice::z(), dir, 0.2, vec![(a, 0.9), (inf, 0.1)]);
        assert_eq!(d.mean_delta(), Delta::Infinite);
    }

    fn two_point_env(seed: u64) -> (SampledEnvironment, CookieStack, CookieStack) {
        let a = CookieStack::repeated(Cookie::new(vec![0.75, 0.25]), 1);
        let b = CookieStack::uniform(2);
        let d = EnvironmentDistribution::new(
            Lattice::z(),
            Direction::e1(1),
            0.25,
            vec![(a.clone(), 0.5), (b.clone(), 0.5)],
        );
        (SampledEnvironment::new(d, seed).unwrap(), a, b)
    }

    #[test]
    fn site_stack_degenerate_and_deterministic() {
        let stack = CookieStack::repeated(Cookie::new(vec![0.75, 0.25]), 2);
        let env = SampledEnvironment::new(
            EnvironmentDistribution::degenerate(Lattice::z(), Direction::e1(1), 0.25, stack.clone()),
            3,
        )
        .unwrap();
        for x in -50..50 {
            assert_eq!(env.site_stack(&[x]).unwrap(), stack);
        }
        let (env, _, _) = two_point_env(11);
        for x in -50..50 {
            assert_eq!(env.site_stack(&[x]).unwrap(), env.site_stack(&[x]).unwrap());
        }
    }

    #[test]
    fn site_stack_frequencies() {
        // Binomial(10^6, 1/2): sd = 500, so +-2000 is a 4-sigma band.
        let (env, a, _) = two_point_env(0x5eed);
        let hits = (0..1_000_000i64).filter(|&x| env.site_stack(&[x]).unwrap() == a).count();
        let frac = hits as f64 / 1e6;
        assert!((0.498..=0.502).contains(&frac), "fraction {frac}");
    }

    #[test]
    fn cookie_at_indexing() {
        let c1 = Cookie::new(vec![0.75, 0.25]);
        let c2 = Cookie::new(vec![0.7, 0.3]);
        let c3 = Cookie::new(vec![0.6, 0.4]);
        let t = Cookie::uniform(2);
        let env = SampledEnvironment::new(z_dist(0.25, vec![c1.clone()]), 0).unwrap();
        assert_eq!(env.cookie_at(&[4], 1).unwrap(), c1);
        assert_eq!(env.cookie_at(&[4], 2).unwrap(), t);
        assert!(matches!(env.cookie_at(&[4], 0), Err(ErwError::Domain(_))));

        let env = SampledEnvironment::new(z_dist(0.25, vec![c1, c2, c3.clone()]), 0).unwrap();
        let two = env.with_consumed([(&[0i64][..], 2)]).unwrap();
        assert_eq!(two.cookie_at(&[0], 1).unwrap(), c3);
        assert_eq!(two.cookie_at(&[1], 1).unwrap(), env.cookie_at(&[1], 1).unwrap());
        let five = env.with_consumed([(&[0i64][..], 5)]).unwrap();
        for i in 1..5 {
            assert_eq!(five.cookie_at(&[0], i).unwrap(), t);
        }
    }

    #[test]
    fn leftover_counts_strict_prefix() {
        let (env, _, _) = two_point_env(1);
        let same = env.leftover(&[vec![0]]).unwrap();
        assert!(same.is_pristine());

        let l = env.leftover(&[vec![0], vec![1], vec![0]]).unwrap();
        assert_eq!(l.offset(&[0]).unwrap(), 1);
        assert_eq!(l.offset(&[1]).unwrap(), 1);
        assert_eq!(l.offset(&[2]).unwrap(), 0);

        let l = env.leftover(&[vec![0], vec![1], vec![2], vec![1]]).unwrap();
        for x in 0..3 {
            assert_eq!(l.offset(&[x]).unwrap(), 1);
        }
        assert!(matches!(env.leftover(&[vec![0], vec![2]]), Err(ErwError::Domain(_))));
    }

    #[test]
    fn leftover_composes() {
        let (env, _, _) = two_point_env(1);
        let path: Vec<Site> = [0, 1, 2, 1, 0, -1, 0, 1].iter().map(|&x| vec![x]).collect();
        let whole = env.leftover(&path).unwrap();
        let first = env.leftover(&path[..4]).unwrap();
        let both = first.leftover(&path[3..]).unwrap();
        for x in -3..4 {
            assert_eq!(whole.offset(&[x]).unwrap(), both.offset(&[x]).unwrap());
        }
    }

    #[test]
    fn shift_identities() {
        let (env, _, _) = two_point_env(9);
        let env = env.leftover(&[vec![0], vec![1], vec![0]]).unwrap();
        let id = env.shift(&[0]).unwrap();
        let back = env.shift(&[7]).unwrap().shift(&[-7]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let x = (rng.next_u64() % 200) as i64 - 100;
            let z = (rng.next_u64() % 200) as i64 - 100;
            let i = rng.next_u64() % 4 + 1;
            assert_eq!(id.cookie_at(&[x], i).unwrap(), env.cookie_at(&[x], i).unwrap());
            assert_eq!(back.cookie_at(&[x], i).unwrap(), env.cookie_at(&[x], i).unwrap());
            let shifted = env.shift(&[z]).unwrap();
            assert_eq!(shifted.cookie_at(&[x], i).unwrap(), env.cookie_at(&[x + z], i).unwrap());
        }
    }

    #[test]
    fn shift_on_strip_wraps_lateral() {
        let stack_a = CookieStack::repeated(Cookie::new(vec![0.4, 0.2, 0.2, 0.2]), 1);
        let d = EnvironmentDistribution::new(
            Lattice::strip(3).unwrap(),
            Direction::e1(2),
            0.1,
            vec![(stack_a, 0.5), (CookieStack::uniform(4), 0.5)],
        );
        let env = SampledEnvironment::new(d, 5).unwrap();
        let s = env.shift(&[2, 2]).unwrap();
        for x in -10..10 {
            for y in 0..3 {
                let target = [x + 2, (y + 2) % 3];
                assert_eq!(s.site_stack(&[x, y]).unwrap(), env.site_stack(&target).unwrap());
            }
        }
    }

    #[test]
    fn sample_r_single_right_step() {
        let kappa = 1e-9;
        let d = z_dist(kappa, vec![Cookie::new(vec![1.0 - kappa, kappa])]);
        let env = SampledEnvironment::new(d, 0).unwrap();
        // the first uniform of this stream is far below 1 - kappa
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = env.sample_r(&mut rng, DEFAULT_R_BUDGET).unwrap();
        assert_eq!(r.translation(), &[1]);
        assert_eq!(r.offset(&[-1]).unwrap(), 1);
        assert_eq!(r.offset(&[0]).unwrap(), 0);
    }

    #[test]
    fn sample_r_leaves_right_half_space_untouched() {
        let env = SampledEnvironment::new(z_dist(0.25, vec![]), 0).unwrap();
        let z2 = EnvironmentDistribution::degenerate(
            Lattice::zd(2).unwrap(),
            Direction::e1(2),
            0.25,
            CookieStack::uniform(4),
        );
        let env2 = SampledEnvironment::new(z2, 0).unwrap();
        for rep in 0..200 {
            let mut rng = rng::stream(3, rep, rng::TAG_WALK);
            let r = env.sample_r(&mut rng, 10_000_000).unwrap();
            assert_eq!(r.translation()[0], 1);
            for x in 0..20 {
                assert_eq!(r.offset(&[x]).unwrap(), 0);
            }
            let r2 = env2.sample_r(&mut rng, 10_000_000).unwrap();
            assert_eq!(r2.translation()[0], 1);
            for x in 0..5 {
                for y in -5..5 {
                    assert_eq!(r2.offset(&[x, y]).unwrap(), 0);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn drawn_cookies_are_admissible(seed in any::<u64>(), x in -10_000i64..10_000, y in 0i64..3, i in 1u64..6) {
            let prefix = vec![
                Cookie::new(vec![0.4, 0.1, 0.25, 0.25]),
                Cookie::new(vec![0.3, 0.2, 0.3, 0.2]),
            ];
            let d = EnvironmentDistribution::new(
                Lattice::strip(3).unwrap(),
                Direction::e1(2),
                0.1,
                vec![(CookieStack::new(prefix, Cookie::uniform(4)), 0.3), (CookieStack::uniform(4), 0.7)],
            );
            let env = SampledEnvironment::new(d.clone(), seed).unwrap();
            let c = env.cookie_at(&[x, y], i).unwrap();
            prop_assert!(cookie_violations(&c, 4, d.kappa, &d.direction).is_empty());
        }

        #[test]
        fn mean_delta_monotone(p in 0.0f64..1.0, a in 0.0f64..0.5, bump in 0.0f64..0.2) {
            let dir = Direction::e1(1);
            let cookie = |drift: f64| Cookie::new(vec![0.5 + drift / 2.0, 0.5 - drift / 2.0]);
            let law = |extra: f64| EnvironmentDistribution::new(
                Lattice::z(), dir.clone(), 0.1,
                vec![
                    (CookieStack::repeated(cookie(a + extra), 2), p),
                    (CookieStack::repeated(cookie(a), 1), 1.0 - p),
                ],
            );
            let lo = law(0.0).mean_delta().finite().unwrap();
            let hi = law(bump).mean_delta().finite().unwrap();
            prop_assert!(lo >= 0.0);
            prop_assert!(hi >= lo - 1e-12);
        }
    }
}
