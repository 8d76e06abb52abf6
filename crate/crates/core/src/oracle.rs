//! Exact absorption quantities on finite windows.
//!
//! On `Z` or a strip, absorb the walk when its first coordinate reaches
//! `-left` or `right`. Inside the window the process
//! `(position, cookies eaten at each interior site)` is a finite Markov
//! chain once eaten-counts are truncated at each stack's prefix length
//! (beyond that every cookie is the tail). Absorption probabilities and the
//! expected absorbed drift solve `(I - Q) h = b` for the appropriate `b`.
//!
//! Optional stopping for `M_n` gives `E[D_T] = right P[right] - left P[left] - x_0`,
//! which [`solve`] checks on every instance.

use std::collections::{BTreeMap, HashMap, VecDeque};

use nalgebra::{DMatrix, DVector};

use crate::environment::{CookieStack, Delta, SampledEnvironment};
use crate::error::{ErwError, Result};
use crate::lattice::{Lattice, Site};

pub const DEFAULT_STATE_CAP: u128 = 10_000_000;
/// Largest reachable state count solved by dense LU under [`SolverChoice::Auto`].
pub const DEFAULT_DENSE_LIMIT: usize = 2_000;
pub const RESIDUAL_TOLERANCE: f64 = 1e-12;
pub const IDENTITY_TOLERANCE: f64 = 1e-9;
pub const MAX_ENUMERATION_DEPTH: u32 = 64;

/// A window `(-left, right)` of `Z` or a strip with an explicit stack at
/// every interior site.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteInstance {
    lattice: Lattice,
    left: i64,
    right: i64,
    width: usize,
    stacks: Vec<CookieStack>,
}

impl FiniteInstance {
    /// Materializes the remaining stacks of `env` on the window interior.
    pub fn from_environment(env: &SampledEnvironment, left: i64, right: i64) -> Result<Self> {
        let lattice = *env.lattice();
        let width = lattice
            .line_width()
            .ok_or_else(|| ErwError::Domain(format!("finite windows need Z or a strip, got {lattice}")))?
            as usize;
        if env.direction().weights()[0] != 1.0 {
            return Err(ErwError::Domain("finite windows need l = e_1".into()));
        }
        if left < 1 || right < 1 {
            return Err(ErwError::Domain(format!("window bounds must be positive, got ({left}, {right})")));
        }
        let dir = env.direction();
        let mut stacks = Vec::with_capacity((left + right - 1) as usize * width);
        for x in (1 - left)..right {
            for y in 0..width as i64 {
                let site = if width == 1 { vec![x] } else { vec![x, y] };
                let stack = env.effective_stack(&site)?;
                if stack.delta(dir) == Delta::Infinite {
                    return Err(ErwError::Refused(format!("stack at {site:?} has a drifting tail")));
                }
                stacks.push(stack);
            }
        }
        Ok(FiniteInstance { lattice, left, right, width, stacks })
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    /// `(i, k)`: absorb at first coordinate `<= -i` or `>= k`.
    pub fn window(&self) -> (i64, i64) {
        (self.left, self.right)
    }

    fn site_index(&self, site: &[i64]) -> Option<usize> {
        let x = site[0];
        if x <= -self.left || x >= self.right {
            return None;
        }
        let y = if self.width == 1 { 0 } else { site[1] as usize };
        Some((x + self.left - 1) as usize * self.width + y)
    }

    fn site_of(&self, index: usize) -> Site {
        let x = (index / self.width) as i64 + 1 - self.left;
        if self.width == 1 {
            vec![x]
        } else {
            vec![x, (index % self.width) as i64]
        }
    }

    pub fn stack_at(&self, site: &[i64]) -> Option<&CookieStack> {
        self.site_index(site).map(|i| &self.stacks[i])
    }

    /// `(#interior sites) * prod_s (prefix_len(s) + 1)`, saturating.
    pub fn state_count(&self) -> u128 {
        self.stacks.iter().fold(self.stacks.len() as u128, |acc, s| acc.saturating_mul(s.prefix.len() as u128 + 1))
    }

    fn check_start(&self, start: &[i64]) -> Result<usize> {
        self.lattice.validate_site(start)?;
        self.site_index(start).ok_or_else(|| ErwError::Domain(format!("start {start:?} is not inside the window")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverChoice {
    /// Dense below the dense limit, iterative above.
    #[default]
    Auto,
    Dense,
    Iterative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleOptions {
    pub state_cap: u128,
    pub solver: SolverChoice,
    pub dense_limit: usize,
    pub max_iterations: usize,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            state_cap: DEFAULT_STATE_CAP,
            solver: SolverChoice::Auto,
            dense_limit: DEFAULT_DENSE_LIMIT,
            max_iterations: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactSolution {
    pub p_right: f64,
    pub p_left: f64,
    pub expected_drift: f64,
    /// Number of reachable transient states.
    pub states: usize,
}

/// Transient part of the absorbing chain reachable from the start.
struct Chain {
    rows: Vec<Vec<(usize, f64)>>,
    to_right: Vec<f64>,
    to_left: Vec<f64>,
    reward: Vec<f64>,
}

fn build_chain(inst: &FiniteInstance, start: &[i64], cap: u128) -> Result<Chain> {
    let start_index = inst.check_start(start)?;
    let total = inst.state_count();
    if total > cap {
        return Err(ErwError::InstanceTooLarge { states: total, cap });
    }
    let radix: Vec<u64> = inst.stacks.iter().map(|s| s.prefix.len() as u64 + 1).collect();
    let mut mult = Vec::with_capacity(radix.len());
    let mut acc = 1u64;
    for r in &radix {
        mult.push(acc);
        acc *= r;
    }
    let profiles = acc;

    let mut index: HashMap<u64, usize> = HashMap::new();
    let mut queue = VecDeque::new();
    let mut chain = Chain { rows: Vec::new(), to_right: Vec::new(), to_left: Vec::new(), reward: Vec::new() };
    let first = start_index as u64 * profiles;
    index.insert(first, 0);
    queue.push_back(first);
    let dir = crate::lattice::Direction::e1(inst.lattice.dim());

    while let Some(key) = queue.pop_front() {
        let site_idx = (key / profiles) as usize;
        let code = key % profiles;
        let eaten = (code / mult[site_idx]) % radix[site_idx];
        let stack = &inst.stacks[site_idx];
        let cookie = stack.prefix.get(eaten as usize).unwrap_or(&stack.tail);
        let next_code = if eaten + 1 < radix[site_idx] { code + mult[site_idx] } else { code };
        let here = inst.site_of(site_idx);

        let (mut right, mut left) = (0.0, 0.0);
        let mut row = Vec::with_capacity(cookie.probs.len());
        for (slot, &p) in cookie.probs.iter().enumerate() {
            let mut target = here.clone();
            inst.lattice.step_in_place(&mut target, slot)?;
            match inst.site_index(&target) {
                None if target[0] >= inst.right => right += p,
                None => left += p,
                Some(t) => {
                    let tkey = t as u64 * profiles + next_code;
                    let next = index.len();
                    let j = *index.entry(tkey).or_insert_with(|| {
                        queue.push_back(tkey);
                        next
                    });
                    row.push((j, p));
                }
            }
        }
        chain.rows.push(row);
        chain.to_right.push(right);
        chain.to_left.push(left);
        chain.reward.push(cookie.drift(&dir));
    }
    Ok(chain)
}

fn solve_dense(chain: &Chain) -> Result<[Vec<f64>; 3]> {
    let n = chain.rows.len();
    let mut a = DMatrix::<f64>::identity(n, n);
    for (i, row) in chain.rows.iter().enumerate() {
        for &(j, p) in row {
            a[(i, j)] -= p;
        }
    }
    let lu = a.lu();
    let mut out: [Vec<f64>; 3] = Default::default();
    for (k, b) in [&chain.to_right, &chain.to_left, &chain.reward].into_iter().enumerate() {
        let x = lu
            .solve(&DVector::from_column_slice(b))
            .ok_or_else(|| ErwError::Internal("singular absorbing system".into()))?;
        out[k] = x.as_slice().to_vec();
    }
    Ok(out)
}

fn solve_iterative(chain: &Chain, max_iterations: usize) -> Result<[Vec<f64>; 3]> {
    let n = chain.rows.len();
    let mut out: [Vec<f64>; 3] = Default::default();
    for (k, b) in [&chain.to_right, &chain.to_left, &chain.reward].into_iter().enumerate() {
        let mut x = vec![0.0; n];
        let mut converged = false;
        for _ in 0..max_iterations {
            for i in 0..n {
                let mut self_loop = 0.0;
                let mut acc = b[i];
                for &(j, p) in &chain.rows[i] {
                    if j == i {
                        self_loop += p;
                    } else {
                        acc += p * x[j];
                    }
                }
                x[i] = acc / (1.0 - self_loop);
            }
            if residual(chain, b, &x) < RESIDUAL_TOLERANCE {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(ErwError::Internal(format!("Gauss-Seidel did not converge in {max_iterations} sweeps")));
        }
        out[k] = x;
    }
    Ok(out)
}

/// `max_i |x_i - b_i - (Q x)_i|`.
fn residual(chain: &Chain, b: &[f64], x: &[f64]) -> f64 {
    chain
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let qx: f64 = row.iter().map(|&(j, p)| p * x[j]).sum();
            (x[i] - b[i] - qx).abs()
        })
        .fold(0.0, f64::max)
}

/// Absorption probabilities and expected absorbed drift from `start`.
pub fn solve(inst: &FiniteInstance, start: &[i64], opts: &OracleOptions) -> Result<ExactSolution> {
    let chain = build_chain(inst, start, opts.state_cap)?;
    let n = chain.rows.len();
    let dense = match opts.solver {
        SolverChoice::Dense => true,
        SolverChoice::Iterative => false,
        SolverChoice::Auto => n <= opts.dense_limit,
    };
    let [right, left, drift] = if dense { solve_dense(&chain)? } else { solve_iterative(&chain, opts.max_iterations)? };
    let sol = ExactSolution { p_right: right[0], p_left: left[0], expected_drift: drift[0], states: n };

    if (sol.p_right + sol.p_left - 1.0).abs() > IDENTITY_TOLERANCE {
        return Err(ErwError::Internal(format!("absorption probabilities sum to {}", sol.p_right + sol.p_left)));
    }
    let x0 = start[0] as f64;
    let stopped = inst.right as f64 * sol.p_right - inst.left as f64 * sol.p_left - x0;
    if (sol.expected_drift - stopped).abs() > IDENTITY_TOLERANCE {
        return Err(ErwError::Internal(format!(
            "optional stopping violated: E[D] = {} but k P_right - i P_left - x0 = {stopped}",
            sol.expected_drift
        )));
    }
    Ok(sol)
}

/// `P[T_right < T_left]` from `start`.
pub fn exact_hitting_prob(inst: &FiniteInstance, start: &[i64]) -> Result<f64> {
    Ok(solve(inst, start, &OracleOptions::default())?.p_right)
}

/// `E[D]` at the absorption time from `start`.
pub fn exact_expected_drift(inst: &FiniteInstance, start: &[i64]) -> Result<f64> {
    Ok(solve(inst, start, &OracleOptions::default())?.expected_drift)
}

/// Probability mass absorbed right, absorbed left, and still alive after
/// a fixed number of steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathMasses {
    pub right: f64,
    pub left: f64,
    pub live: f64,
}

impl PathMasses {
    /// `[right, right + live]`, which contains `P[right]`.
    pub fn bracket(&self) -> (f64, f64) {
        (self.right, self.right + self.live)
    }
}

/// Sums the probabilities of every path of length at most `depth`.
///
/// Paths that share position and per-site visit counts (capped where the
/// stack turns into its tail) are merged, which keeps the sum exhaustive
/// without listing `2d^depth` paths. Cookies are read through
/// [`CookieStack::cookie`] and moves through [`Lattice::neighbors`], not
/// through the chain used by [`solve`].
pub fn enumerate_paths(inst: &FiniteInstance, start: &[i64], depth: u32) -> Result<PathMasses> {
    if depth > MAX_ENUMERATION_DEPTH {
        return Err(ErwError::Domain(format!("depth {depth} exceeds {MAX_ENUMERATION_DEPTH}")));
    }
    inst.check_start(start)?;
    // Ordered so the float sums do not depend on hash seeds.
    let mut frontier: BTreeMap<(Site, Vec<u32>), f64> = BTreeMap::new();
    let mut visits = vec![0u32; inst.stacks.len()];
    visits[inst.site_index(start).expect("checked")] = 1;
    frontier.insert((start.to_vec(), visits), 1.0);
    let (mut right, mut left) = (0.0, 0.0);

    for _ in 0..depth {
        let mut next: BTreeMap<(Site, Vec<u32>), f64> = BTreeMap::new();
        for ((site, visits), mass) in frontier {
            let idx = inst.site_index(&site).expect("frontier is interior");
            let cookie = inst.stacks[idx].cookie(visits[idx] as usize, 0);
            for (target, &p) in inst.lattice.neighbors(&site)?.into_iter().zip(&cookie.probs) {
                let w = mass * p;
                match inst.site_index(&target) {
                    None if target[0] >= inst.right => right += w,
                    None => left += w,
                    Some(t) => {
                        let mut v = visits.clone();
                        let cap = inst.stacks[t].prefix.len() as u32 + 1;
                        v[t] = (v[t] + 1).min(cap);
                        *next.entry((target, v)).or_insert(0.0) += w;
                    }
                }
            }
        }
        frontier = next;
    }
    let live: f64 = frontier.values().sum();
    Ok(PathMasses { right, left, live })
}
