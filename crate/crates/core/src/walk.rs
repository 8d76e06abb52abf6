//! The excited-walk engine.
//!
//! On its `i`-th visit to a site (the start counts as the first visit) the
//! walker eats the `i`-th remaining cookie there and jumps by inverse CDF
//! over the canonical slot order, one uniform per step. The drift of the
//! eaten cookie is credited to the slab of the departure site, so after
//! `n` steps
//!
//! ```text
//! D_n   = sum of drifts of cookies eaten at times 0..n-1
//! M_n   = (X_n - X_0).l - D_n
//! ```
//!
//! and `M_n` is a martingale for every fixed environment.

use std::collections::{HashMap, VecDeque};

use rand::RngCore;

use crate::environment::{SampledEnvironment, PROB_TOLERANCE};
use crate::error::{ErwError, Result};
use crate::lattice::{Direction, Lattice, Site};
use crate::rng::{next_unit, MixBuildHasher};

pub const DEFAULT_SITE_CAP: usize = 100_000_000;

/// Tolerance used when comparing replayed and incremental accumulators.
pub const REPLAY_TOLERANCE: f64 = 1e-9;

const LADDER_TOLERANCE: f64 = 1e-12;
const UNRESOLVED: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopRule {
    /// Hard cap on the number of steps.
    pub max_steps: u64,
    /// Stop at `T_x = inf{n : X_n.l >= x}`.
    pub hit_right: Option<f64>,
    /// Stop at the first `n` with `X_n.l <= y`.
    pub hit_left: Option<f64>,
    /// Stop at the first return to the start (`n >= 1`).
    pub stop_on_return: bool,
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule { max_steps: 1_000_000, hit_right: None, hit_left: None, stop_on_return: false }
    }
}

impl StopRule {
    pub fn budget(max_steps: u64) -> Self {
        StopRule { max_steps, ..StopRule::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WalkOptions {
    /// Ring-buffer capacity for path retention; `None` disables retention.
    pub path_capacity: Option<usize>,
    /// Record ladder times online.
    pub ladder: bool,
    /// Maximum number of distinct sites before the replica is aborted.
    pub site_cap: usize,
    /// Negative-control harness: jump with the cookie this many positions
    /// further down the stack while still crediting the drift of the
    /// correct one. Always 0 outside of tests of the diagnostics.
    pub cookie_index_shift: u64,
}

impl Default for WalkOptions {
    fn default() -> Self {
        WalkOptions { path_capacity: None, ladder: false, site_cap: DEFAULT_SITE_CAP, cookie_index_shift: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StopReason {
    HitRight,
    HitLeft,
    Returned,
    Budget,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::HitRight => "hit_right",
            StopReason::HitLeft => "hit_left",
            StopReason::Returned => "returned",
            StopReason::Budget => "budget",
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct SiteRecord {
    visits: u64,
    stack: u32,
    offset: u64,
}

impl SiteRecord {
    const EMPTY: SiteRecord = SiteRecord { visits: 0, stack: UNRESOLVED, offset: 0 };
}

/// Dense storage for `Z` and strips: columns indexed by the first coordinate.
#[derive(Debug, Clone)]
struct LineStore {
    width: usize,
    origin: i64,
    records: Vec<SiteRecord>,
}

impl LineStore {
    fn new(width: usize, center: i64) -> Self {
        let cols = 64;
        LineStore { width, origin: center - cols / 2, records: vec![SiteRecord::EMPTY; cols as usize * width] }
    }

    fn cols(&self) -> i64 {
        (self.records.len() / self.width) as i64
    }

    #[inline]
    fn slot(&mut self, site: &[i64]) -> &mut SiteRecord {
        let x = site[0];
        if x < self.origin || x >= self.origin + self.cols() {
            self.grow(x);
        }
        let y = if self.width == 1 { 0 } else { site[1] as usize };
        let idx = (x - self.origin) as usize * self.width + y;
        &mut self.records[idx]
    }

    #[cold]
    fn grow(&mut self, x: i64) {
        let cols = self.cols();
        let lo = x.min(self.origin);
        let hi = (x + 1).max(self.origin + cols);
        let new_cols = (2 * (hi - lo)).max(2 * cols);
        let new_origin = if x < self.origin { hi - new_cols } else { self.origin };
        let mut records = vec![SiteRecord::EMPTY; new_cols as usize * self.width];
        let start = (self.origin - new_origin) as usize * self.width;
        records[start..start + self.records.len()].copy_from_slice(&self.records);
        self.records = records;
        self.origin = new_origin;
    }

    fn get(&self, site: &[i64]) -> Option<&SiteRecord> {
        let x = site[0];
        if x < self.origin || x >= self.origin + self.cols() {
            return None;
        }
        let y = if self.width == 1 { 0 } else { site[1] as usize };
        self.records.get((x - self.origin) as usize * self.width + y)
    }

    fn iter(&self) -> impl Iterator<Item = (Site, &SiteRecord)> + '_ {
        let width = self.width;
        let origin = self.origin;
        self.records.iter().enumerate().filter(|(_, r)| r.visits > 0).map(move |(i, r)| {
            let x = origin + (i / width) as i64;
            let site = if width == 1 { vec![x] } else { vec![x, (i % width) as i64] };
            (site, r)
        })
    }
}

#[derive(Debug, Clone)]
enum SiteStore {
    Line(LineStore),
    Map(HashMap<Site, SiteRecord, MixBuildHasher>),
}

impl SiteStore {
    fn new(lattice: &Lattice, start: &[i64]) -> Self {
        match lattice.line_width() {
            Some(w) => SiteStore::Line(LineStore::new(w as usize, start[0])),
            None => SiteStore::Map(HashMap::default()),
        }
    }

    /// Increments the visit count at `site`, resolving its stack on first
    /// visit. Returns the updated record and whether the site is new.
    #[inline]
    fn visit(&mut self, site: &[i64], env: &SampledEnvironment, scratch: &mut Vec<i64>) -> (SiteRecord, bool) {
        let rec = match self {
            SiteStore::Line(line) => line.slot(site),
            SiteStore::Map(map) => {
                if let Some(rec) = map.get_mut(site) {
                    rec.visits += 1;
                    return (*rec, false);
                }
                let r = env.resolve_viewed(site, scratch);
                let rec = SiteRecord { visits: 1, stack: r.stack, offset: r.offset };
                map.insert(site.to_vec(), rec);
                return (rec, true);
            }
        };
        let fresh = rec.stack == UNRESOLVED;
        if fresh {
            let r = env.resolve_viewed(site, scratch);
            rec.stack = r.stack;
            rec.offset = r.offset;
        }
        rec.visits += 1;
        (*rec, fresh)
    }

    fn visits(&self, site: &[i64]) -> u64 {
        match self {
            SiteStore::Line(line) => line.get(site).map_or(0, |r| r.visits),
            SiteStore::Map(map) => map.get(site).map_or(0, |r| r.visits),
        }
    }

    fn iter(&self) -> Box<dyn Iterator<Item = (Site, u64)> + '_> {
        match self {
            SiteStore::Line(line) => Box::new(line.iter().map(|(s, r)| (s, r.visits))),
            SiteStore::Map(map) => {
                Box::new(map.iter().filter(|(_, r)| r.visits > 0).map(|(s, r)| (s.clone(), r.visits)))
            }
        }
    }
}

/// Absorbed drift per slab. Slabs visited by a nearest-neighbour walk form
/// an interval, so a dense vector suffices.
#[derive(Debug, Clone, Default)]
pub struct SlabLedger {
    origin: i64,
    values: Vec<f64>,
}

impl SlabLedger {
    #[inline]
    fn add(&mut self, slab: i64, v: f64) {
        if self.values.is_empty() {
            self.origin = slab;
            self.values.push(0.0);
        }
        if slab < self.origin {
            let pad = ((self.origin - slab) as usize).max(self.values.len());
            self.values.splice(0..0, std::iter::repeat_n(0.0, pad));
            self.origin -= pad as i64;
        }
        let idx = (slab - self.origin) as usize;
        if idx >= self.values.len() {
            self.values.resize(idx + 1, 0.0);
        }
        self.values[idx] += v;
    }

    pub fn get(&self, slab: i64) -> f64 {
        if slab < self.origin {
            return 0.0;
        }
        self.values.get((slab - self.origin) as usize).copied().unwrap_or(0.0)
    }

    /// `(slab, drift)` pairs over the touched interval, ascending.
    pub fn iter(&self) -> impl Iterator<Item = (i64, f64)> + '_ {
        self.values.iter().enumerate().map(move |(i, &v)| (self.origin + i as i64, v))
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

#[inline(always)]
fn same_site(a: &[i64], b: &[i64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x == y)
}

/// Snapshot of a walk: position, local times and drift bookkeeping.
#[derive(Debug, Clone)]
pub struct WalkState {
    position: Site,
    start: Site,
    time: u64,
    store: SiteStore,
    distinct: usize,
    drift_total: f64,
    slabs: SlabLedger,
    mart: f64,
    start_proj: f64,
    proj: f64,
    min_proj: f64,
    max_proj: f64,
    returns_to_start: u64,
    sign_changes: u64,
    last_sign: i8,
}

impl WalkState {
    pub fn position(&self) -> &[i64] {
        &self.position
    }

    pub fn start(&self) -> &[i64] {
        &self.start
    }

    /// Number of steps taken, `n`.
    pub fn time(&self) -> u64 {
        self.time
    }

    /// `D_n`.
    pub fn drift_total(&self) -> f64 {
        self.drift_total
    }

    /// `D_n^z` for every touched slab.
    pub fn slabs(&self) -> &SlabLedger {
        &self.slabs
    }

    /// `M_n = (X_n - X_0).l - D_n`.
    pub fn mart(&self) -> f64 {
        self.mart
    }

    /// `X_n.l`.
    pub fn projection(&self) -> f64 {
        self.proj
    }

    /// `(X_n - X_0).l`.
    pub fn displacement(&self) -> f64 {
        self.proj - self.start_proj
    }

    pub fn min_proj(&self) -> f64 {
        self.min_proj
    }

    pub fn max_proj(&self) -> f64 {
        self.max_proj
    }

    pub fn returns_to_start(&self) -> u64 {
        self.returns_to_start
    }

    /// Number of sign alternations of `(X_n - X_0).l`, zeros skipped.
    pub fn sign_changes(&self) -> u64 {
        self.sign_changes
    }

    pub fn distinct_sites(&self) -> usize {
        self.distinct
    }

    /// `#{m <= n : X_m = site}`.
    pub fn visits(&self, site: &[i64]) -> u64 {
        self.store.visits(site)
    }

    pub fn visit_counts(&self) -> impl Iterator<Item = (Site, u64)> + '_ {
        self.store.iter()
    }
}

/// One retained step of the history.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEntry {
    pub site: Site,
    /// `D_n` after arriving at `site`.
    pub drift_total: f64,
    /// `M_n` after arriving at `site`.
    pub mart: f64,
}

/// Online ladder-time accumulator: `tau_0 = 0`, then the first times the
/// projection exceeds the previous ladder level by at least one.
#[derive(Debug, Clone)]
pub struct LadderTracker {
    level: f64,
    times: Vec<u64>,
}

impl LadderTracker {
    pub fn new(initial_proj: f64) -> Self {
        LadderTracker { level: initial_proj, times: vec![0] }
    }

    #[inline]
    pub fn observe(&mut self, time: u64, proj: f64) {
        if proj >= self.level + 1.0 - LADDER_TOLERANCE {
            self.level = proj;
            self.times.push(time);
        }
    }

    pub fn times(&self) -> &[u64] {
        &self.times
    }

    pub fn into_times(self) -> Vec<u64> {
        self.times
    }
}

/// Ladder times of a projection sequence `(X_0.l, X_1.l, ...)`.
pub fn ladder_times(projections: &[f64]) -> Vec<u64> {
    let Some(&first) = projections.first() else {
        return Vec::new();
    };
    let mut tracker = LadderTracker::new(first);
    for (n, &p) in projections.iter().enumerate().skip(1) {
        tracker.observe(n as u64, p);
    }
    tracker.into_times()
}

#[derive(Debug, Clone)]
pub struct TrajectorySummary {
    pub stop_reason: StopReason,
    pub state: WalkState,
    /// Step count at which the right level was first reached.
    pub hit_time: Option<u64>,
    pub path: Option<Vec<PathEntry>>,
    /// True when the ring buffer dropped early entries.
    pub path_truncated: bool,
    pub ladder_times: Option<Vec<u64>>,
}

impl TrajectorySummary {
    /// Replays the retained path against `env`; requires a complete path.
    pub fn recompute_invariants(&self, env: &SampledEnvironment) -> Result<std::result::Result<(), Mismatch>> {
        let path = self.path.as_ref().ok_or_else(|| ErwError::Domain("path retention was off".into()))?;
        if self.path_truncated {
            return Err(ErwError::Domain("path ring buffer overflowed; history incomplete".into()));
        }
        recompute_invariants(env, path, Some(&self.state))
    }
}

/// The walker bound to one environment.
pub struct Walk<'e> {
    env: &'e SampledEnvironment,
    lattice: Lattice,
    dir: Direction,
    state: WalkState,
    current: SiteRecord,
    scratch: Vec<i64>,
    site_cap: usize,
    index_shift: u64,
    path: Option<(VecDeque<PathEntry>, usize)>,
    path_truncated: bool,
    ladder: Option<LadderTracker>,
}

impl<'e> Walk<'e> {
    /// A walk at `start` with time 0 and the start counted as visited once.
    pub fn new(env: &'e SampledEnvironment, start: &[i64]) -> Result<Self> {
        Self::with_options(env, start, &WalkOptions::default())
    }

    pub fn with_options(env: &'e SampledEnvironment, start: &[i64], opts: &WalkOptions) -> Result<Self> {
        let lattice = *env.lattice();
        lattice.validate_site(start)?;
        let dir = env.direction().clone();
        let mut scratch = Vec::with_capacity(start.len());
        let mut store = SiteStore::new(&lattice, start);
        let (current, _) = store.visit(start, env, &mut scratch);
        let proj = dir.project_unchecked(start);
        let state = WalkState {
            position: start.to_vec(),
            start: start.to_vec(),
            time: 0,
            store,
            distinct: 1,
            drift_total: 0.0,
            slabs: SlabLedger::default(),
            mart: 0.0,
            start_proj: proj,
            proj,
            min_proj: proj,
            max_proj: proj,
            returns_to_start: 0,
            sign_changes: 0,
            last_sign: 0,
        };
        let path = opts.path_capacity.map(|cap| {
            let mut ring = VecDeque::with_capacity(cap.min(1 << 20));
            if cap > 0 {
                ring.push_back(PathEntry { site: start.to_vec(), drift_total: 0.0, mart: 0.0 });
            }
            (ring, cap)
        });
        Ok(Walk {
            env,
            lattice,
            dir,
            state,
            current,
            scratch,
            site_cap: opts.site_cap,
            index_shift: opts.cookie_index_shift,
            path,
            path_truncated: opts.path_capacity == Some(0),
            ladder: opts.ladder.then(|| LadderTracker::new(proj)),
        })
    }

    pub fn state(&self) -> &WalkState {
        &self.state
    }

    pub fn into_state(self) -> WalkState {
        self.state
    }

    /// One transition driven by the uniform `u` in `[0, 1)`.
    #[inline]
    pub fn step(&mut self, u: f64) -> Result<()> {
        if !(0.0..1.0).contains(&u) {
            return Err(ErwError::Domain(format!("uniform {u} outside [0, 1)")));
        }
        let st = &mut self.state;
        let rec = self.current;
        let stack = self.env.compiled(rec.stack);
        let index = (rec.visits - 1).saturating_add(rec.offset);
        let drift = stack.drift(stack.row(index));
        let slot = stack.choose(stack.row(index.saturating_add(self.index_shift)), u);
        let slab = self.dir.slab_unchecked(&st.position);

        self.lattice.step_in_place(&mut st.position, slot)?;
        st.time += 1;
        st.drift_total += drift;
        st.slabs.add(slab, drift);

        let (next, fresh) = st.store.visit(&st.position, self.env, &mut self.scratch);
        self.current = next;
        if fresh {
            st.distinct += 1;
            if st.distinct > self.site_cap {
                return Err(ErwError::SiteCapExceeded { cap: self.site_cap });
            }
        }

        let proj = self.dir.project_unchecked(&st.position);
        st.mart += (proj - st.proj) - drift;
        st.proj = proj;
        st.min_proj = st.min_proj.min(proj);
        st.max_proj = st.max_proj.max(proj);
        if same_site(&st.position, &st.start) {
            st.returns_to_start += 1;
        }
        let rel = proj - st.start_proj;
        let sign = if rel > PROB_TOLERANCE {
            1
        } else if rel < -PROB_TOLERANCE {
            -1
        } else {
            0
        };
        if sign != 0 {
            if st.last_sign != 0 && sign != st.last_sign {
                st.sign_changes += 1;
            }
            st.last_sign = sign;
        }

        if let Some((ring, cap)) = &mut self.path {
            if ring.len() == *cap {
                ring.pop_front();
                self.path_truncated = true;
            }
            if *cap > 0 {
                ring.push_back(PathEntry { site: st.position.clone(), drift_total: st.drift_total, mart: st.mart });
            }
        }
        if let Some(ladder) = &mut self.ladder {
            ladder.observe(st.time, proj);
        }
        Ok(())
    }

    /// The first stop condition that holds now, in the order right, left, return, budget.
    pub fn stop_reason(&self, rule: &StopRule) -> Option<StopReason> {
        let st = &self.state;
        if rule.hit_right.is_some_and(|x| st.proj >= x) {
            return Some(StopReason::HitRight);
        }
        if rule.hit_left.is_some_and(|y| st.proj <= y) {
            return Some(StopReason::HitLeft);
        }
        if rule.stop_on_return && st.time >= 1 && same_site(&st.position, &st.start) {
            return Some(StopReason::Returned);
        }
        if st.time >= rule.max_steps {
            return Some(StopReason::Budget);
        }
        None
    }

    /// Steps until the first stop condition; budget exhaustion is a normal outcome.
    pub fn run<R: RngCore>(mut self, rng: &mut R, rule: &StopRule) -> Result<TrajectorySummary> {
        let reason = loop {
            if let Some(reason) = self.stop_reason(rule) {
                break reason;
            }
            self.step(next_unit(rng))?;
        };
        let hit_time = (reason == StopReason::HitRight).then_some(self.state.time);
        Ok(TrajectorySummary {
            stop_reason: reason,
            hit_time,
            path: self.path.map(|(ring, _)| ring.into_iter().collect()),
            path_truncated: self.path_truncated,
            ladder_times: self.ladder.map(LadderTracker::into_times),
            state: self.state,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct LineRecord {
    /// 0-based index of the next cookie to eat.
    next: u64,
    first_row: u32,
    prefix_len: u32,
}

impl LineRecord {
    const EMPTY: LineRecord = LineRecord { next: 0, first_row: UNRESOLVED, prefix_len: 0 };
}

/// Reduced walker for `Z` and strips, where the direction is `e1` and the
/// projection is the first coordinate.
///
/// Follows exactly the trajectory of [`Walk`] for the same uniforms but
/// keeps only counters: no path, no slab ledger, no martingale. Cookie rows
/// of all stacks are flattened into one table so a step touches one site
/// record and one row.
pub struct LineWalk<'e> {
    env: &'e SampledEnvironment,
    width: i64,
    slots: usize,
    /// Cumulative rows padded to four slots with `INFINITY`.
    cdf: Vec<[f64; 4]>,
    drift: Vec<f64>,
    /// `(first_row, prefix_len)` per compiled stack.
    stacks: Vec<(u32, u32)>,
    origin: i64,
    /// One past the last column held in `records`.
    end: i64,
    records: Vec<LineRecord>,
    current: LineRecord,
    x: i64,
    y: i64,
    start: (i64, i64),
    time: u64,
    drift_total: f64,
    min_x: i64,
    max_x: i64,
    returns: u64,
    sign_changes: u64,
    last_sign: i8,
}

const LINE_DX: [i64; 4] = [1, -1, 0, 0];
const LINE_DY: [i64; 4] = [0, 0, 1, -1];

impl<'e> LineWalk<'e> {
    pub fn new(env: &'e SampledEnvironment, start: &[i64]) -> Result<Self> {
        let lattice = *env.lattice();
        let Some(width) = lattice.line_width() else {
            return Err(ErwError::Domain(format!("reduced walker needs Z or a strip, got {lattice}")));
        };
        lattice.validate_site(start)?;
        let mut cdf = Vec::new();
        let mut drift = Vec::new();
        let mut stacks = Vec::new();
        for j in 0..env.stack_count() {
            let c = env.compiled(j as u32);
            stacks.push((drift.len() as u32, c.prefix_len() as u32));
            for row in c.cdf_rows().chunks(lattice.slots()) {
                let mut padded = [f64::INFINITY; 4];
                padded[..row.len()].copy_from_slice(row);
                cdf.push(padded);
            }
            drift.extend_from_slice(c.drifts());
        }
        let (x, y) = (start[0], if width == 1 { 0 } else { start[1] });
        let mut walk = LineWalk {
            env,
            width: i64::from(width),
            slots: lattice.slots(),
            cdf,
            drift,
            stacks,
            origin: x - 32,
            end: x + 32,
            records: vec![LineRecord::EMPTY; 64 * width as usize],
            current: LineRecord::EMPTY,
            x,
            y,
            start: (x, y),
            time: 0,
            drift_total: 0.0,
            min_x: x,
            max_x: x,
            returns: 0,
            sign_changes: 0,
            last_sign: 0,
        };
        walk.arrive();
        Ok(walk)
    }

    /// Counts a visit at the current site and loads its record.
    #[inline]
    fn arrive(&mut self) {
        let width = self.width as usize;
        if self.x < self.origin || self.x >= self.end {
            self.grow();
        }
        let idx = (self.x - self.origin) as usize * width + self.y as usize;
        let rec = &mut self.records[idx];
        if rec.first_row == UNRESOLVED {
            let site = [self.x, self.y];
            let r = self.env.resolve_viewed(&site[..if width == 1 { 1 } else { 2 }], &mut Vec::new());
            let (first_row, prefix_len) = self.stacks[r.stack as usize];
            *rec = LineRecord { next: r.offset, first_row, prefix_len };
        }
        self.current = *rec;
        rec.next = rec.next.saturating_add(1);
    }

    #[cold]
    fn grow(&mut self) {
        let width = self.width as usize;
        let cols = (self.records.len() / width) as i64;
        let lo = self.x.min(self.origin);
        let hi = (self.x + 1).max(self.origin + cols);
        let new_cols = (2 * (hi - lo)).max(2 * cols);
        let new_origin = if self.x < self.origin { hi - new_cols } else { self.origin };
        let mut records = vec![LineRecord::EMPTY; new_cols as usize * width];
        let at = (self.origin - new_origin) as usize * width;
        records[at..at + self.records.len()].copy_from_slice(&self.records);
        self.records = records;
        self.origin = new_origin;
        self.end = new_origin + new_cols;
    }

    /// One transition driven by the uniform `u` in `[0, 1)`.
    #[inline]
    pub fn step(&mut self, u: f64) -> Result<()> {
        if !(0.0..1.0).contains(&u) {
            return Err(ErwError::Domain(format!("uniform {u} outside [0, 1)")));
        }
        let rec = self.current;
        let row = rec.first_row as usize + rec.next.min(u64::from(rec.prefix_len)) as usize;
        self.drift_total += self.drift[row];
        let passed: usize = self.cdf[row].iter().map(|&c| usize::from(u >= c)).sum();
        let slot = passed.min(self.slots - 1);

        self.x = self.x.checked_add(LINE_DX[slot]).ok_or_else(|| ErwError::Overflow(self.site()))?;
        let y = self.y + LINE_DY[slot];
        self.y = if y == self.width {
            0
        } else if y < 0 {
            self.width - 1
        } else {
            y
        };
        self.time += 1;
        self.arrive();

        self.min_x = self.min_x.min(self.x);
        self.max_x = self.max_x.max(self.x);
        self.returns += u64::from((self.x, self.y) == self.start);
        let sign = (self.x - self.start.0).signum() as i8;
        if sign != 0 {
            self.sign_changes += u64::from(self.last_sign != 0 && sign != self.last_sign);
            self.last_sign = sign;
        }
        Ok(())
    }

    pub fn time(&self) -> u64 {
        self.time
    }

    /// Current site in lattice coordinates.
    pub fn site(&self) -> Site {
        if self.width == 1 {
            vec![self.x]
        } else {
            vec![self.x, self.y]
        }
    }

    /// Projection `X_n . e1`.
    pub fn projection(&self) -> i64 {
        self.x
    }

    pub fn displacement(&self) -> i64 {
        self.x - self.start.0
    }

    pub fn at_start(&self) -> bool {
        (self.x, self.y) == self.start
    }

    pub fn drift_total(&self) -> f64 {
        self.drift_total
    }

    pub fn min_proj(&self) -> i64 {
        self.min_x
    }

    pub fn max_proj(&self) -> i64 {
        self.max_x
    }

    pub fn returns_to_start(&self) -> u64 {
        self.returns
    }

    pub fn sign_changes(&self) -> u64 {
        self.sign_changes
    }
}

/// First disagreement between a replay and the incremental accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    /// Time index of the first divergent entry.
    pub step: u64,
    pub field: &'static str,
    pub expected: f64,
    pub found: f64,
}

impl std::fmt::Display for Mismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} diverges at step {}: replay {} vs recorded {}", self.field, self.step, self.expected, self.found)
    }
}

/// Replays `path` (starting at time 0) through `env` with the plain
/// cookie-lookup route and compares `D_n`, `M_n` and, when `state` is
/// given, the per-slab drifts against what the engine recorded.
pub fn recompute_invariants(
    env: &SampledEnvironment,
    path: &[PathEntry],
    state: Option<&WalkState>,
) -> Result<std::result::Result<(), Mismatch>> {
    let Some(first) = path.first() else {
        return Err(ErwError::Domain("empty path".into()));
    };
    let lattice = env.lattice();
    let dir = env.direction();
    let origin = dir.project(&first.site)?;
    let mut visits: HashMap<&[i64], u64> = HashMap::new();
    visits.insert(&first.site, 1);
    let mut drift_total = 0.0;
    let mut slabs: HashMap<i64, f64> = HashMap::new();
    let check = |step: u64, field: &'static str, expected: f64, found: f64| {
        if (expected - found).abs() > REPLAY_TOLERANCE {
            Err(Mismatch { step, field, expected, found })
        } else {
            Ok(())
        }
    };
    if let Err(m) = check(0, "drift_total", 0.0, first.drift_total).and(check(0, "mart", 0.0, first.mart)) {
        return Ok(Err(m));
    }
    for (m, w) in path.windows(2).enumerate() {
        let (here, next) = (&w[0], &w[1]);
        if !lattice.adjacent(&here.site, &next.site) {
            return Err(ErwError::Domain(format!("path step {m} is not nearest-neighbor")));
        }
        let visit = visits[here.site.as_slice()];
        let drift = env.cookie_at(&here.site, visit)?.drift(dir);
        drift_total += drift;
        *slabs.entry(dir.slab_index(&here.site)?).or_insert(0.0) += drift;
        *visits.entry(&next.site).or_insert(0) += 1;
        let step = m as u64 + 1;
        let mart = dir.project(&next.site)? - origin - drift_total;
        if let Err(mm) =
            check(step, "drift_total", drift_total, next.drift_total).and(check(step, "mart", mart, next.mart))
        {
            return Ok(Err(mm));
        }
    }
    if let Some(st) = state {
        let n = path.len() as u64 - 1;
        if st.time() != n {
            return Err(ErwError::Domain(format!("path covers {n} steps, state is at time {}", st.time())));
        }
        for (z, v) in st.slabs().iter() {
            let expected = slabs.get(&z).copied().unwrap_or(0.0);
            if let Err(mm) = check(n, "drift_by_slab", expected, v) {
                return Ok(Err(mm));
            }
        }
        if let Err(mm) = check(n, "drift_total", drift_total, st.drift_total()).and(check(
            n,
            "mart",
            path[path.len() - 1].mart,
            st.mart(),
        )) {
            return Ok(Err(mm));
        }
    }
    Ok(Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{Cookie, CookieStack, EnvironmentDistribution};
    use crate::rng;

    fn z_env(prefix: Vec<Cookie>, kappa: f64) -> SampledEnvironment {
        let d = EnvironmentDistribution::degenerate(
            Lattice::z(),
            Direction::e1(1),
            kappa,
            CookieStack::new(prefix, Cookie::uniform(2)),
        );
        SampledEnvironment::new(d, 0).unwrap()
    }

    #[test]
    fn init_state() {
        let env = z_env(vec![], 0.25);
        let w = Walk::new(&env, &[0]).unwrap();
        let s = w.state();
        assert_eq!(s.position(), &[0]);
        assert_eq!(s.drift_total(), 0.0);
        assert_eq!(s.mart(), 0.0);
        assert_eq!(s.visits(&[0]), 1);

        let strip = EnvironmentDistribution::degenerate(
            Lattice::strip(3).unwrap(),
            Direction::e1(2),
            0.25,
            CookieStack::uniform(4),
        );
        let env = SampledEnvironment::new(strip, 0).unwrap();
        let w = Walk::new(&env, &[0, 1]).unwrap();
        assert_eq!(w.state().visit_counts().collect::<Vec<_>>(), vec![(vec![0, 1], 1)]);
        assert!(Walk::new(&env, &[0, 3]).is_err());
    }

    #[test]
    fn step_inverse_cdf() {
        let env = z_env(vec![Cookie::new(vec![0.75, 0.25])], 0.25);
        let mut w = Walk::new(&env, &[0]).unwrap();
        w.step(0.8).unwrap();
        assert_eq!(w.state().position(), &[-1]);
        assert_eq!(w.state().drift_total(), 0.5);
        assert_eq!(w.state().mart(), -1.5);

        let mut w = Walk::new(&env, &[0]).unwrap();
        w.step(0.0).unwrap();
        assert_eq!(w.state().position(), &[1]);
        assert_eq!(w.state().mart(), 0.5);
        assert!(w.step(1.0).is_err());
    }

    #[test]
    fn uniform_cookie_no_drift() {
        let d = EnvironmentDistribution::degenerate(
            Lattice::zd(2).unwrap(),
            Direction::e1(2),
            0.25,
            CookieStack::uniform(4),
        );
        let env = SampledEnvironment::new(d, 0).unwrap();
        for u in [0.1, 0.3, 0.6, 0.9] {
            let mut w = Walk::new(&env, &[0, 0]).unwrap();
            w.step(u).unwrap();
            assert_eq!(w.state().drift_total(), 0.0);
            assert_eq!(w.state().mart(), w.state().projection());
        }
    }

    #[test]
    fn visit_counts_drive_cookie_index() {
        // prefix: one strongly right cookie, then uniform tail
        let env = z_env(vec![Cookie::new(vec![0.75, 0.25])], 0.25);
        let mut w = Walk::new(&env, &[0]).unwrap();
        w.step(0.0).unwrap(); // 0 -> 1, eats cookie 1 at 0
        w.step(0.9).unwrap(); // 1 -> 0, eats cookie 1 at 1
        w.step(0.6).unwrap(); // second visit at 0 uses uniform tail: 0.6 >= 0.5 -> left
        assert_eq!(w.state().position(), &[-1]);
        assert_eq!(w.state().drift_total(), 1.0);
        assert_eq!(w.state().slabs().get(0), 0.5);
        assert_eq!(w.state().slabs().get(1), 0.5);
        let total: u64 = w.state().visit_counts().map(|(_, c)| c).sum();
        assert_eq!(total, w.state().time() + 1);
    }

    #[test]
    fn run_stops_at_first_condition() {
        let env = z_env(vec![], 0.25);
        let rule = StopRule { max_steps: 10_000_000, hit_right: Some(0.0), ..StopRule::default() };
        let s = Walk::new(&env, &[0]).unwrap().run(&mut rng::stream(1, 0, 0), &rule).unwrap();
        assert_eq!(s.stop_reason, StopReason::HitRight);
        assert_eq!(s.hit_time, Some(0));

        let rule = StopRule { max_steps: 5, ..StopRule::default() };
        let s = Walk::new(&env, &[0]).unwrap().run(&mut rng::stream(1, 0, 0), &rule).unwrap();
        assert_eq!(s.stop_reason, StopReason::Budget);
        assert_eq!(s.state.time(), 5);

        let rule = StopRule { max_steps: 10_000_000, stop_on_return: true, ..StopRule::default() };
        let s = Walk::new(&env, &[0]).unwrap().run(&mut rng::stream(1, 0, 0), &rule).unwrap();
        assert_eq!(s.stop_reason, StopReason::Returned);
        assert_eq!(s.state.position(), &[0]);
        assert_eq!(s.state.time() % 2, 0);
    }

    #[test]
    fn ladder_examples() {
        assert_eq!(ladder_times(&[0.0, 1.0, 2.0, 3.0]), vec![0, 1, 2, 3]);
        assert_eq!(ladder_times(&[0.0, -1.0, 0.0, 1.0])[1], 3);
        assert_eq!(ladder_times(&[0.0, 0.5, 1.0])[1], 2);
    }

    #[test]
    fn ladder_equals_hitting_times_on_line() {
        let env = z_env(vec![Cookie::new(vec![0.75, 0.25])], 0.25);
        let opts = WalkOptions { ladder: true, path_capacity: Some(100_000), ..WalkOptions::default() };
        let rule = StopRule { max_steps: 50_000, hit_right: Some(30.0), ..StopRule::default() };
        for rep in 0..20 {
            let s = Walk::with_options(&env, &[0], &opts).unwrap().run(&mut rng::stream(2, rep, 0), &rule).unwrap();
            let ladder = s.ladder_times.unwrap();
            let path = s.path.unwrap();
            for (k, &tau) in ladder.iter().enumerate() {
                let first = path.iter().position(|e| e.site[0] >= k as i64).unwrap() as u64;
                assert_eq!(tau, first);
            }
        }
    }

    #[test]
    fn replay_matches_and_catches_forgery() {
        let prefix = vec![Cookie::new(vec![0.4, 0.1, 0.3, 0.2]), Cookie::new(vec![0.35, 0.15, 0.25, 0.25])];
        let d = EnvironmentDistribution::new(
            Lattice::zd(2).unwrap(),
            Direction::new(&Lattice::zd(2).unwrap(), vec![0.75, 0.25]).unwrap(),
            0.1,
            vec![(CookieStack::new(prefix, Cookie::uniform(4)), 0.6), (CookieStack::uniform(4), 0.4)],
        );
        let env = SampledEnvironment::new(d, 77).unwrap();
        let opts = WalkOptions { path_capacity: Some(2000), ..WalkOptions::default() };
        let s = Walk::with_options(&env, &[0, 0], &opts)
            .unwrap()
            .run(&mut rng::stream(5, 0, 0), &StopRule::budget(1000))
            .unwrap();
        assert_eq!(s.recompute_invariants(&env).unwrap(), Ok(()));

        let mut forged = s.path.clone().unwrap();
        forged[417].drift_total += 0.25;
        let m = recompute_invariants(&env, &forged, None).unwrap().unwrap_err();
        assert_eq!(m.step, 417);
        assert_eq!(m.field, "drift_total");
    }

    #[test]
    fn zero_drift_replay_has_no_drift() {
        let env = z_env(vec![], 0.25);
        let opts = WalkOptions { path_capacity: Some(2000), ..WalkOptions::default() };
        let s = Walk::with_options(&env, &[0], &opts)
            .unwrap()
            .run(&mut rng::stream(6, 0, 0), &StopRule::budget(1000))
            .unwrap();
        assert!(s.path.as_ref().unwrap().iter().all(|e| e.drift_total == 0.0));
        assert_eq!(s.recompute_invariants(&env).unwrap(), Ok(()));
    }

    #[test]
    fn truncated_path_refuses_replay() {
        let env = z_env(vec![], 0.25);
        let opts = WalkOptions { path_capacity: Some(10), ..WalkOptions::default() };
        let s = Walk::with_options(&env, &[0], &opts)
            .unwrap()
            .run(&mut rng::stream(6, 0, 0), &StopRule::budget(100))
            .unwrap();
        assert!(s.path_truncated);
        assert_eq!(s.path.as_ref().unwrap().len(), 10);
        assert!(s.recompute_invariants(&env).is_err());
    }

    #[test]
    fn site_cap_aborts() {
        let env = z_env(vec![], 0.25);
        let opts = WalkOptions { site_cap: 3, ..WalkOptions::default() };
        let r =
            Walk::with_options(&env, &[0], &opts).unwrap().run(&mut rng::stream(6, 0, 0), &StopRule::budget(10_000));
        assert!(matches!(r, Err(ErwError::SiteCapExceeded { cap: 3 })));
    }

    #[test]
    fn pathwise_invariants_hold_every_step() {
        let prefix = vec![Cookie::new(vec![0.6, 0.2, 0.1, 0.1])];
        let d = EnvironmentDistribution::degenerate(
            Lattice::strip(2).unwrap(),
            Direction::e1(2),
            0.1,
            CookieStack::new(prefix, Cookie::uniform(4)),
        );
        let env = SampledEnvironment::new(d, 3).unwrap();
        let mut w = Walk::new(&env, &[0, 0]).unwrap();
        let mut r = rng::stream(9, 0, 0);
        let mut last_d = 0.0;
        for _ in 0..20_000 {
            w.step(rng::next_unit(&mut r)).unwrap();
            let s = w.state();
            assert!(s.drift_total() >= last_d);
            last_d = s.drift_total();
            assert!((s.mart() - (s.displacement() - s.drift_total())).abs() < 1e-9);
            assert!(s.slabs().iter().all(|(_, v)| v >= 0.0));
        }
        let s = w.state();
        assert!((s.slabs().total() - s.drift_total()).abs() < 1e-9);
        let total: u64 = s.visit_counts().map(|(_, c)| c).sum();
        assert_eq!(total, s.time() + 1);
    }

    #[test]
    fn sign_changes_and_returns() {
        let env = z_env(vec![], 0.25);
        let mut w = Walk::new(&env, &[0]).unwrap();
        // +1, 0, -1, 0, +1
        for u in [0.1, 0.9, 0.9, 0.1, 0.1] {
            w.step(u).unwrap();
        }
        assert_eq!(w.state().sign_changes(), 2);
        assert_eq!(w.state().returns_to_start(), 2);
        assert_eq!(w.state().min_proj(), -1.0);
        assert_eq!(w.state().max_proj(), 1.0);
    }

    #[test]
    fn line_store_grows_both_ways() {
        let mut line = LineStore::new(2, 0);
        for x in [-500i64, 700, 3, -2000] {
            line.slot(&[x, 1]).visits += 1;
        }
        let got: Vec<_> = line.iter().map(|(s, r)| (s, r.visits)).collect();
        assert_eq!(got, vec![(vec![-2000, 1], 1), (vec![-500, 1], 1), (vec![3, 1], 1), (vec![700, 1], 1)]);
    }

    #[test]
    fn line_walk_tracks_full_walk() {
        let two = CookieStack::new(
            vec![Cookie::new(vec![0.5, 0.1, 0.2, 0.2]), Cookie::new(vec![0.4, 0.2, 0.3, 0.1])],
            Cookie::uniform(4),
        );
        let d = EnvironmentDistribution::new(
            Lattice::strip(3).unwrap(),
            Direction::e1(2),
            0.05,
            vec![(two, 0.5), (CookieStack::uniform(4), 0.5)],
        );
        let base = SampledEnvironment::new(d, 11).unwrap();
        let env = base.shift(&[2, 1]).unwrap();
        for start in [[0, 0], [-3, 2]] {
            let mut full = Walk::new(&env, &start).unwrap();
            let mut line = LineWalk::new(&env, &start).unwrap();
            let mut r = rng::stream(4, 0, 0);
            for _ in 0..50_000 {
                let u = rng::next_unit(&mut r);
                full.step(u).unwrap();
                line.step(u).unwrap();
                let s = full.state();
                assert_eq!(line.site(), s.position());
                assert_eq!(line.returns_to_start(), s.returns_to_start());
                assert_eq!(line.sign_changes(), s.sign_changes());
                assert_eq!(line.min_proj() as f64, s.min_proj());
                assert_eq!(line.max_proj() as f64, s.max_proj());
            }
            assert_eq!(line.drift_total(), full.state().drift_total());
            assert_eq!(line.time(), full.state().time());
        }
    }

    #[test]
    fn line_walk_refuses_plane() {
        let d = EnvironmentDistribution::degenerate(
            Lattice::zd(2).unwrap(),
            Direction::e1(2),
            0.1,
            CookieStack::uniform(4),
        );
        let env = SampledEnvironment::new(d, 0).unwrap();
        assert!(LineWalk::new(&env, &[0, 0]).is_err());
    }
}
