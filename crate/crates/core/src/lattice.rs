//! State spaces, the drift direction, and slab bookkeeping.
//!
//! Direction slots follow one global order: `+e_1, -e_1, +e_2, -e_2, ...`.
//! Every cookie probability vector and every inverse-CDF draw refers to
//! this order. On a strip of width 2 both lateral slots lead to the same
//! site; they stay distinct slots because cookies weight slots, not targets.

use serde::{Deserialize, Serialize};

use crate::error::{ErwError, Result};

/// Slab-boundary tolerance for floating-point projections.
pub const SLAB_TOLERANCE: f64 = 1e-12;

pub type Site = Vec<i64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Lattice {
    /// `Z^d`; `Zd { dim: 1 }` is the integer line.
    Zd { dim: usize },
    /// `Z x {0, ..., width-1}` with the second coordinate taken modulo `width`.
    Strip { width: u32 },
}

impl Lattice {
    pub fn z() -> Self {
        Lattice::Zd { dim: 1 }
    }

    pub fn zd(dim: usize) -> Result<Self> {
        let lattice = Lattice::Zd { dim };
        lattice.check()?;
        Ok(lattice)
    }

    pub fn strip(width: u32) -> Result<Self> {
        let lattice = Lattice::Strip { width };
        lattice.check()?;
        Ok(lattice)
    }

    /// Rejects `Zd { dim: 0 }` and strips narrower than 2.
    pub fn check(&self) -> Result<()> {
        match *self {
            Lattice::Zd { dim: 0 } => Err(ErwError::Domain("Z^d requires d >= 1".into())),
            Lattice::Strip { width } if width < 2 => Err(ErwError::Domain(format!("strip width {width} < 2"))),
            _ => Ok(()),
        }
    }

    /// Number of coordinates of a site (2 for strips).
    pub fn dim(&self) -> usize {
        match *self {
            Lattice::Zd { dim } => dim,
            Lattice::Strip { .. } => 2,
        }
    }

    /// Number of direction slots, `2d`.
    pub fn slots(&self) -> usize {
        2 * self.dim()
    }

    /// Width of the cross-section orthogonal to `e_1` for one-dimensional
    /// lattices: 1 for `Z`, `L` for strips, `None` for `Z^d` with `d >= 2`.
    pub fn line_width(&self) -> Option<u32> {
        match *self {
            Lattice::Zd { dim: 1 } => Some(1),
            Lattice::Strip { width } => Some(width),
            Lattice::Zd { .. } => None,
        }
    }

    pub fn origin(&self) -> Site {
        vec![0; self.dim()]
    }

    pub fn validate_site(&self, site: &[i64]) -> Result<()> {
        if site.len() != self.dim() {
            return Err(ErwError::Domain(format!(
                "site {site:?} has {} coordinates, lattice needs {}",
                site.len(),
                self.dim()
            )));
        }
        if let Lattice::Strip { width } = *self {
            if !(0..i64::from(width)).contains(&site[1]) {
                return Err(ErwError::Domain(format!("strip coordinate {} outside [0, {width})", site[1])));
            }
        }
        Ok(())
    }

    /// Moves `site` in place through direction slot `slot`.
    #[inline]
    pub fn step_in_place(&self, site: &mut [i64], slot: usize) -> Result<()> {
        let axis = slot / 2;
        let sign = if slot.is_multiple_of(2) { 1 } else { -1 };
        match *self {
            Lattice::Strip { width } if axis == 1 => {
                site[1] = (site[1] + sign).rem_euclid(i64::from(width));
                Ok(())
            }
            _ => match site[axis].checked_add(sign) {
                Some(v) => {
                    site[axis] = v;
                    Ok(())
                }
                None => Err(ErwError::Overflow(site.to_vec())),
            },
        }
    }

    /// The `2d` neighbor slots of `site` in canonical order; duplicates kept.
    pub fn neighbors(&self, site: &[i64]) -> Result<Vec<Site>> {
        self.validate_site(site)?;
        (0..self.slots())
            .map(|slot| {
                let mut next = site.to_vec();
                self.step_in_place(&mut next, slot)?;
                Ok(next)
            })
            .collect()
    }

    /// `site + by`, wrapping the strip coordinate.
    pub fn translate(&self, site: &[i64], by: &[i64]) -> Result<Site> {
        if site.len() != by.len() {
            return Err(ErwError::Domain("translation dimension mismatch".into()));
        }
        let mut out = Vec::with_capacity(site.len());
        for (axis, (&a, &b)) in site.iter().zip(by).enumerate() {
            let v = a.checked_add(b).ok_or_else(|| ErwError::Overflow(site.to_vec()))?;
            out.push(match *self {
                Lattice::Strip { width } if axis == 1 => v.rem_euclid(i64::from(width)),
                _ => v,
            });
        }
        Ok(out)
    }

    /// Translation by the negation of `by` (strip coordinate wrapped).
    pub fn negate(&self, by: &[i64]) -> Site {
        by.iter()
            .enumerate()
            .map(|(axis, &b)| match *self {
                Lattice::Strip { width } if axis == 1 => (-b).rem_euclid(i64::from(width)),
                _ => -b,
            })
            .collect()
    }

    /// Whether two sites are nearest neighbors (through some direction slot).
    pub fn adjacent(&self, a: &[i64], b: &[i64]) -> bool {
        self.neighbors(a).map(|ns| ns.iter().any(|n| n.as_slice() == b)).unwrap_or(false)
    }
}

impl std::fmt::Display for Lattice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            Lattice::Zd { dim: 1 } => write!(f, "Z"),
            Lattice::Zd { dim } => write!(f, "Z^{dim}"),
            Lattice::Strip { width } => write!(f, "strip({width})"),
        }
    }
}

/// Exact rational representation of a direction: `numerators / denominator`.
#[derive(Debug, Clone, PartialEq, Eq)]
struct ExactDirection {
    numerators: Vec<i128>,
    denominator: i128,
}

/// The drift direction `l`, with `|l|_1 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    weights: Vec<f64>,
    exact: Option<ExactDirection>,
    /// `Some(k)` when `l = e_k`; projections are then exact integer reads.
    axis: Option<usize>,
}

impl Direction {
    /// The first standard unit vector in `dim` coordinates.
    pub fn e1(dim: usize) -> Self {
        let mut weights = vec![0.0; dim];
        weights[0] = 1.0;
        let mut numerators = vec![0; dim];
        numerators[0] = 1;
        Direction { weights, exact: Some(ExactDirection { numerators, denominator: 1 }), axis: Some(0) }
    }

    /// Floating-point direction; `|l|_1` must equal 1 within `1e-12`.
    /// On `Z` and strips only `e_1` is accepted.
    pub fn new(lattice: &Lattice, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != lattice.dim() {
            return Err(ErwError::Domain(format!(
                "direction has {} entries, lattice needs {}",
                weights.len(),
                lattice.dim()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(ErwError::Domain("direction entries must be finite".into()));
        }
        let norm: f64 = weights.iter().map(|w| w.abs()).sum();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(ErwError::Domain(format!("|l|_1 = {norm}, expected 1")));
        }
        let axis = weights.iter().position(|&w| w == 1.0);
        let exact = axis.map(|k| {
            let mut numerators = vec![0; weights.len()];
            numerators[k] = 1;
            ExactDirection { numerators, denominator: 1 }
        });
        let dir = Direction { weights, exact, axis };
        dir.check_lattice(lattice)?;
        Ok(dir)
    }

    /// Exact direction from `(numerator, denominator)` pairs.
    pub fn from_rationals(lattice: &Lattice, entries: &[(i64, i64)]) -> Result<Self> {
        if entries.len() != lattice.dim() {
            return Err(ErwError::Domain(format!(
                "direction has {} entries, lattice needs {}",
                entries.len(),
                lattice.dim()
            )));
        }
        if entries.iter().any(|&(_, d)| d == 0) {
            return Err(ErwError::Domain("zero denominator in direction".into()));
        }
        let denominator: i128 = entries.iter().fold(1i128, |acc, &(_, d)| lcm(acc, i128::from(d).abs()));
        let numerators: Vec<i128> = entries
            .iter()
            .map(|&(n, d)| i128::from(n) * (denominator / i128::from(d).abs()) * i128::from(d.signum()))
            .collect();
        let norm: i128 = numerators.iter().map(|n| n.abs()).sum();
        if norm != denominator {
            return Err(ErwError::Domain(format!("|l|_1 = {norm}/{denominator}, expected exactly 1")));
        }
        let weights: Vec<f64> = numerators.iter().map(|&n| n as f64 / denominator as f64).collect();
        let axis = numerators.iter().position(|&n| n == denominator);
        let dir = Direction { weights, exact: Some(ExactDirection { numerators, denominator }), axis };
        dir.check_lattice(lattice)?;
        Ok(dir)
    }

    fn check_lattice(&self, lattice: &Lattice) -> Result<()> {
        if lattice.line_width().is_some() && self.axis != Some(0) {
            return Err(ErwError::Domain(format!("on {lattice} the direction must be e_1")));
        }
        Ok(())
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn is_exact(&self) -> bool {
        self.exact.is_some()
    }

    /// `max_e e.l` over unit vectors, i.e. the largest single-step gain.
    pub fn max_unit(&self) -> f64 {
        self.weights.iter().fold(0.0, |m, w| f64::max(m, w.abs()))
    }

    /// `e.l` for direction slot `slot`.
    #[inline]
    pub fn slot_gain(&self, slot: usize) -> f64 {
        let w = self.weights[slot / 2];
        if slot.is_multiple_of(2) {
            w
        } else {
            -w
        }
    }

    fn check_dim(&self, site: &[i64]) -> Result<()> {
        if site.len() != self.weights.len() {
            return Err(ErwError::Domain(format!(
                "site has {} coordinates, direction has {}",
                site.len(),
                self.weights.len()
            )));
        }
        Ok(())
    }

    /// `x.l`.
    pub fn project(&self, site: &[i64]) -> Result<f64> {
        self.check_dim(site)?;
        Ok(self.project_unchecked(site))
    }

    #[inline]
    pub(crate) fn project_unchecked(&self, site: &[i64]) -> f64 {
        match (self.axis, &self.exact) {
            (Some(k), _) => site[k] as f64,
            (None, Some(ex)) => {
                let num: i128 = site.iter().zip(&ex.numerators).map(|(&x, &n)| i128::from(x) * n).sum();
                num as f64 / ex.denominator as f64
            }
            (None, None) => site.iter().zip(&self.weights).map(|(&x, &w)| x as f64 * w).sum(),
        }
    }

    /// The slab `z` with `z <= x.l < z + 1`.
    pub fn slab_index(&self, site: &[i64]) -> Result<i64> {
        self.check_dim(site)?;
        Ok(self.slab_unchecked(site))
    }

    #[inline]
    pub(crate) fn slab_unchecked(&self, site: &[i64]) -> i64 {
        match (self.axis, &self.exact) {
            (Some(k), _) => site[k],
            (None, Some(ex)) => {
                let num: i128 = site.iter().zip(&ex.numerators).map(|(&x, &n)| i128::from(x) * n).sum();
                num.div_euclid(ex.denominator) as i64
            }
            (None, None) => (self.project_unchecked(site) + SLAB_TOLERANCE).floor() as i64,
        }
    }
}

fn gcd(a: i128, b: i128) -> i128 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: i128, b: i128) -> i128 {
    a / gcd(a, b) * b
}
