//! Signals on Z/LZ, the cyclic shift action, the orbit distance and the class of
//! collision-free signals.
//!
//! A signal is a real vector indexed by residues mod `L`. The shift `R^(l)` acts by
//! `(R^(l) theta)(i) = theta(i + l)`; the orbit distance is the Euclidean distance
//! minimised over all shifts of the second argument.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Real vector indexed by Z/LZ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    values: Vec<f64>,
}

impl Signal {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("signal length must be positive".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("signal values must be finite".into()));
        }
        Ok(Self { values })
    }

    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "signal length must be positive");
        Self {
            values: vec![0.0; len],
        }
    }

    /// Signal with the given values on `support` and zero elsewhere.
    pub fn from_support(len: usize, support: &[usize], values: &[f64]) -> Result<Self> {
        if support.len() != values.len() {
            return Err(Error::LengthMismatch {
                expected: support.len(),
                found: values.len(),
            });
        }
        let mut out = vec![0.0; len];
        for (&i, &v) in support.iter().zip(values) {
            if i >= len {
                return Err(Error::InvalidInput(format!("support index {i} >= {len}")));
            }
            out[i] = v;
        }
        Self::new(out)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Indices with a nonzero value, ascending.
    pub fn support(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.len() as f64
    }

    pub fn scaled(&self, factor: f64) -> Signal {
        Signal {
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn negated(&self) -> Signal {
        self.scaled(-1.0)
    }

    /// `i -> -i` reflection.
    pub fn reflected(&self) -> Signal {
        let l = self.len();
        Signal {
            values: (0..l).map(|i| self.values[(l - i) % l]).collect(),
        }
    }

    pub fn sub(&self, other: &Signal) -> Result<Signal> {
        check_len(self, other)?;
        Ok(Signal {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    /// Shift by any integer, reduced mod `L`.
    pub fn shifted(&self, ell: i64) -> Signal {
        let l = self.len() as i64;
        let ell = ell.rem_euclid(l) as usize;
        let n = self.len();
        Signal {
            values: (0..n).map(|i| self.values[(i + ell) % n]).collect(),
        }
    }

    /// Two-line text record: `L=<int>` then the values with 17 significant digits.
    pub fn to_record(&self) -> String {
        let mut out = format!("L={}\n", self.len());
        for (i, v) in self.values.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v:.16e}");
        }
        out.push('\n');
        out
    }

    pub fn from_record(text: &str) -> Result<Signal> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty signal record".into()))?;
        let len: usize = header
            .trim()
            .strip_prefix("L=")
            .ok_or_else(|| Error::Parse(format!("bad signal header `{header}`")))?
            .parse()
            .map_err(|e| Error::Parse(format!("bad length: {e}")))?;
        let body = lines
            .next()
            .ok_or_else(|| Error::Parse("missing signal values".into()))?;
        let values = body
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("bad value `{t}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != len {
            return Err(Error::LengthMismatch {
                expected: len,
                found: values.len(),
            });
        }
        Signal::new(values)
    }
}

fn check_len(a: &Signal, b: &Signal) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(())
}

/// `R^(ell) theta`, with `0 <= ell < L` enforced.
pub fn cyclic_shift(theta: &Signal, ell: i64) -> Result<Signal> {
    if ell < 0 || ell as usize >= theta.len() {
        return Err(Error::ShiftOutOfRange {
            shift: ell,
            len: theta.len(),
        });
    }
    Ok(theta.shifted(ell))
}

/// Orbit distance and the smallest shift of the second argument attaining it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrbitDistance {
    pub value: f64,
    pub shift: usize,
}

fn distance_at_shift(theta: &[f64], phi: &[f64], ell: usize) -> f64 {
    let l = theta.len();
    let mut acc = 0.0;
    for i in 0..l {
        let d = theta[i] - phi[(i + ell) % l];
        acc += d * d;
    }
    acc.sqrt()
}

/// `min_l ||theta - R^(l) phi||` by a direct O(L^2) scan.
pub fn rho_distance(theta: &Signal, phi: &Signal) -> Result<OrbitDistance> {
    check_len(theta, phi)?;
    let (a, b) = (theta.values(), phi.values());
    let mut best = OrbitDistance {
        value: f64::INFINITY,
        shift: 0,
    };
    for ell in 0..a.len() {
        let d = distance_at_shift(a, b, ell);
        if d < best.value {
            best = OrbitDistance {
                value: d,
                shift: ell,
            };
        }
    }
    Ok(best)
}

/// Same as [`rho_distance`], locating the minimising shift through an FFT
/// cross-correlation. The returned value is recomputed directly at that shift.
pub fn rho_distance_fft(theta: &Signal, phi: &Signal) -> Result<OrbitDistance> {
    check_len(theta, phi)?;
    let l = theta.len();
    let corr = circular_cross_correlation_fft(theta.values(), phi.values());
    let base = theta.norm_sq() + phi.norm_sq();
    let mut best_shift = 0;
    let mut best_sq = f64::INFINITY;
    for (ell, c) in corr.iter().enumerate() {
        let sq = base - 2.0 * c;
        if sq < best_sq {
            best_sq = sq;
            best_shift = ell;
        }
    }
    // resolve near-ties exactly so both paths share the tie-break rule
    let scale = 1e-9 * base.max(f64::MIN_POSITIVE);
    let mut best = OrbitDistance {
        value: f64::INFINITY,
        shift: best_shift,
    };
    for (ell, c) in corr.iter().enumerate().take(l) {
        if base - 2.0 * c <= best_sq + scale {
            let d = distance_at_shift(theta.values(), phi.values(), ell);
            if d < best.value {
                best = OrbitDistance { value: d, shift: ell };
            }
        }
    }
    Ok(best)
}

/// `out[l] = sum_i a(i) b(i + l)` computed with an FFT.
pub fn circular_cross_correlation_fft(a: &[f64], b: &[f64]) -> Vec<f64> {
    let l = a.len();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(l);
    let inv = planner.plan_fft_inverse(l);
    let mut fa: Vec<Complex64> = a.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let mut fb: Vec<Complex64> = b.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    let mut prod: Vec<Complex64> = fa.iter().zip(&fb).map(|(x, y)| x.conj() * y).collect();
    inv.process(&mut prod);
    prod.iter().map(|c| c.re / l as f64).collect()
}

/// Multiset of pairwise support differences `i - j mod L`, `i != j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DifferenceMultiset {
    len: usize,
    counts: BTreeMap<usize, usize>,
}

impl DifferenceMultiset {
    pub fn from_support(support: &[usize], len: usize) -> Self {
        let mut counts = BTreeMap::new();
        for &i in support {
            for &j in support {
                if i != j {
                    *counts.entry((i + len - j) % len).or_insert(0) += 1;
                }
            }
        }
        Self { len, counts }
    }

    /// Builds a multiset from explicit counts. Zero counts are dropped.
    pub fn from_counts(len: usize, counts: BTreeMap<usize, usize>) -> Result<Self> {
        let mut clean = BTreeMap::new();
        for (d, c) in counts {
            if d == 0 || d >= len {
                return Err(Error::InvalidInput(format!(
                    "difference {d} outside 1..{len}"
                )));
            }
            if c > 0 {
                clean.insert(d, c);
            }
        }
        Ok(Self { len, counts: clean })
    }

    pub fn len_modulus(&self) -> usize {
        self.len
    }

    pub fn counts(&self) -> &BTreeMap<usize, usize> {
        &self.counts
    }

    pub fn count(&self, d: usize) -> usize {
        self.counts.get(&d).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn is_symmetric(&self) -> bool {
        self.counts
            .iter()
            .all(|(&d, &c)| self.count(self.len - d) == c)
    }

    /// Every difference appears exactly once.
    pub fn is_collision_free(&self) -> bool {
        self.counts.values().all(|&c| c == 1)
    }

    /// Smallest difference with multiplicity above one.
    pub fn first_collision(&self) -> Option<usize> {
        self.counts
            .iter()
            .find(|(_, &c)| c > 1)
            .map(|(&d, _)| d)
    }
}

pub fn difference_multiset(theta: &Signal) -> DifferenceMultiset {
    DifferenceMultiset::from_support(&theta.support(), theta.len())
}

pub fn is_collision_free(theta: &Signal) -> bool {
    difference_multiset(theta).is_collision_free()
}

pub fn support_is_collision_free(support: &[usize], len: usize) -> bool {
    DifferenceMultiset::from_support(support, len).is_collision_free()
}

/// Parameters `(L, s, m, M, eps)` of the collision-free class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalClassSpec {
    pub len: usize,
    pub sparsity: usize,
    pub m_lo: f64,
    pub m_hi: f64,
    pub eps: f64,
}

impl Default for SignalClassSpec {
    fn default() -> Self {
        Self {
            len: 57,
            sparsity: 7,
            m_lo: 0.75,
            m_hi: 1.0,
            eps: 0.1,
        }
    }
}

/// Node budget for the randomized support search.
pub const SUPPORT_SEARCH_BUDGET: usize = 1_000_000;

/// Randomized attempts, each with a fiftieth of the node budget.
pub const SUPPORT_SEARCH_RESTARTS: usize = 200;

impl SignalClassSpec {
    /// Validated class: magnitudes ordered, `s >= max(7, (2+eps) M^2 / m^2)` and
    /// `s(s-1) <= L-1`.
    pub fn new(len: usize, sparsity: usize, m_lo: f64, m_hi: f64, eps: f64) -> Result<Self> {
        let spec = Self::relaxed(len, sparsity, m_lo, m_hi, eps)?;
        let ratio_floor = ((2.0 + eps) * m_hi * m_hi / (m_lo * m_lo)).ceil();
        if (sparsity as f64) < ratio_floor.max(7.0) {
            return Err(Error::InvalidClass(format!(
                "s = {sparsity} below max(7, ceil((2+eps) M^2/m^2)) = {}",
                ratio_floor.max(7.0)
            )));
        }
        Ok(spec)
    }

    /// Class without the `s >= 7` / magnitude-ratio condition. Used for tiny
    /// brute-force instances and for small-support experiments.
    pub fn relaxed(len: usize, sparsity: usize, m_lo: f64, m_hi: f64, eps: f64) -> Result<Self> {
        if len == 0 || sparsity == 0 {
            return Err(Error::InvalidClass("L and s must be positive".into()));
        }
        if !(m_lo > 0.0 && m_lo <= m_hi && m_hi.is_finite()) {
            return Err(Error::InvalidClass(format!(
                "need 0 < m_lo <= M_hi, got {m_lo}, {m_hi}"
            )));
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidClass(format!("eps must be positive, got {eps}")));
        }
        if sparsity * (sparsity - 1) > len - 1 {
            return Err(Error::InvalidClass(format!(
                "s(s-1) = {} exceeds L-1 = {}",
                sparsity * (sparsity - 1),
                len - 1
            )));
        }
        Ok(Self {
            len,
            sparsity,
            m_lo,
            m_hi,
            eps,
        })
    }

    /// Checks class membership (support size, collision freeness, magnitudes).
    pub fn check(&self, theta: &Signal) -> Result<()> {
        if theta.len() != self.len {
            return Err(Error::LengthMismatch {
                expected: self.len,
                found: theta.len(),
            });
        }
        let support = theta.support();
        if support.len() != self.sparsity {
            return Err(Error::Precondition(format!(
                "support size {} != s = {}",
                support.len(),
                self.sparsity
            )));
        }
        let diffs = DifferenceMultiset::from_support(&support, self.len);
        if let Some(d) = diffs.first_collision() {
            return Err(Error::NotCollisionFree { difference: d });
        }
        for &i in &support {
            let a = theta.values()[i].abs();
            if a < self.m_lo || a > self.m_hi {
                return Err(Error::Precondition(format!(
                    "|theta({i})| = {a} outside [{}, {}]",
                    self.m_lo, self.m_hi
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, theta: &Signal) -> bool {
        self.check(theta).is_ok()
    }

    /// Largest norm a class member can have.
    pub fn max_norm(&self) -> f64 {
        self.m_hi * (self.sparsity as f64).sqrt()
    }

    /// Nearest value with magnitude in `[m_lo, M_hi]`; zero maps to `m_lo`.
    pub fn clip(&self, v: f64) -> f64 {
        let a = v.abs().clamp(self.m_lo, self.m_hi);
        if v < 0.0 {
            -a
        } else {
            a
        }
    }
}

/// Randomized exhaustive search for a collision-free `s`-subset of Z/LZ.
///
/// The search pins 0, visits ascending candidates in a seeded random order and
/// backtracks on collisions; the result is then translated and possibly
/// reflected at random. Exhausting the tree proves that no such set exists.
pub fn sample_collision_free_support(spec: &SignalClassSpec, seed: u64) -> Result<Vec<usize>> {
    let mut rng = rng::stream(seed, &[0x5u64]);
    let (l, s) = (spec.len, spec.sparsity);
    let base = randomized_search(l, s, &mut rng)?;
    let shift = rng.random_range(0..l);
    let reflect = rng.random_bool(0.5);
    let mut out: Vec<usize> = base
        .iter()
        .map(|&x| {
            let y = if reflect { (l - x) % l } else { x };
            (y + shift) % l
        })
        .collect();
    out.sort_unstable();
    Ok(out)
}

/// Random restarts of a budgeted depth-first search. Deep dead ends are common
/// near the pigeonhole limit, so many shallow attempts beat one long one. If
/// every attempt runs out, an exhaustive lexicographic search either finds a set
/// or proves that none exists.
fn randomized_search<R: Rng>(l: usize, s: usize, rng: &mut R) -> Result<Vec<usize>> {
    for _ in 0..SUPPORT_SEARCH_RESTARTS {
        match search_collision_free(l, s, Some(&mut *rng), SUPPORT_SEARCH_BUDGET / 50) {
            Ok(v) => return Ok(v),
            Err(Error::SamplingBudgetExhausted { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    first_collision_free_support(l, s)
}

/// First collision-free `s`-subset containing 0 in lexicographic order.
pub fn first_collision_free_support(len: usize, s: usize) -> Result<Vec<usize>> {
    search_collision_free::<rand_chacha::ChaCha8Rng>(len, s, None, SUPPORT_SEARCH_BUDGET)
}

fn search_collision_free<R: Rng>(
    l: usize,
    s: usize,
    mut rng: Option<&mut R>,
    budget: usize,
) -> Result<Vec<usize>> {
    if s == 0 {
        return Ok(Vec::new());
    }
    if s * (s - 1) > l.saturating_sub(1) {
        return Err(Error::NoCollisionFreeSupport { l, s });
    }
    let mut used = vec![false; l];
    let mut chosen = vec![0usize];
    let mut nodes = 0usize;

    // one frame per depth: candidate list and cursor
    let mut frames: Vec<(Vec<usize>, usize)> = Vec::new();
    let first = candidates_after(0, l, &mut rng);
    frames.push((first, 0));
    if s == 1 {
        return Ok(chosen);
    }
    while let Some((cands, cursor)) = frames.last_mut() {
        if *cursor >= cands.len() {
            frames.pop();
            if let Some(x) = chosen.pop() {
                if !chosen.is_empty() {
                    release(&chosen, x, l, &mut used);
                }
            }
            if chosen.is_empty() {
                break;
            }
            continue;
        }
        let c = cands[*cursor];
        *cursor += 1;
        nodes += 1;
        if nodes > budget {
            return Err(Error::SamplingBudgetExhausted { budget });
        }
        if try_claim(&chosen, c, l, &mut used) {
            chosen.push(c);
            if chosen.len() == s {
                chosen.sort_unstable();
                return Ok(chosen);
            }
            let next = candidates_after(c, l, &mut rng);
            frames.push((next, 0));
        }
    }
    Err(Error::NoCollisionFreeSupport { l, s })
}

fn candidates_after<R: Rng>(after: usize, l: usize, rng: &mut Option<&mut R>) -> Vec<usize> {
    let mut v: Vec<usize> = (after + 1..l).collect();
    if let Some(r) = rng.as_deref_mut() {
        v.shuffle(r);
    }
    v
}

pub(crate) fn try_claim(chosen: &[usize], c: usize, l: usize, used: &mut [bool]) -> bool {
    let mut new: Vec<usize> = Vec::with_capacity(2 * chosen.len());
    for &a in chosen {
        for d in [(c + l - a) % l, (a + l - c) % l] {
            if used[d] || new.contains(&d) {
                return false;
            }
            new.push(d);
        }
    }
    for d in new {
        used[d] = true;
    }
    true
}

fn release(chosen: &[usize], c: usize, l: usize, used: &mut [bool]) {
    for &a in chosen {
        used[(c + l - a) % l] = false;
        used[(a + l - c) % l] = false;
    }
}

/// Random class member: collision-free support, magnitudes uniform on
/// `[m_lo, M_hi]`, independent symmetric signs.
pub fn sample_class_signal(spec: &SignalClassSpec, seed: u64) -> Result<Signal> {
    let support = sample_collision_free_support(spec, seed)?;
    let mut rng = rng::stream(seed, &[0x7u64]);
    let values: Vec<f64> = support
        .iter()
        .map(|_| {
            let mag = if spec.m_hi > spec.m_lo {
                rng.random_range(spec.m_lo..=spec.m_hi)
            } else {
                spec.m_lo
            };
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Signal::from_support(spec.len, &support, &values)
}

/// Keeps the `s` largest-magnitude coordinates (ties to the lower index),
/// zeroes the rest and clips the kept magnitudes into `[m_lo, M_hi]`.
pub fn project_to_class(phi: &Signal, spec: &SignalClassSpec) -> Result<Signal> {
    if phi.len() != spec.len {
        return Err(Error::LengthMismatch {
            expected: spec.len,
            found: phi.len(),
        });
    }
    let order = magnitude_order(phi);
    let kept: Vec<usize> = order
        .into_iter()
        .take(spec.sparsity)
        .filter(|&i| phi.values()[i] != 0.0)
        .collect();
    if kept.len() < spec.sparsity {
        return Err(Error::Precondition(format!(
            "only {} nonzero coordinates, need s = {}",
            kept.len(),
            spec.sparsity
        )));
    }
    let diffs = DifferenceMultiset::from_support(&kept, spec.len);
    if let Some(d) = diffs.first_collision() {
        return Err(Error::NotCollisionFree { difference: d });
    }
    let mut out = vec![0.0; spec.len];
    for &i in &kept {
        out[i] = spec.clip(phi.values()[i]);
    }
    Signal::new(out)
}

/// Greedy variant of [`project_to_class`]: walks coordinates by decreasing
/// magnitude and keeps each one that leaves the support collision free.
pub fn project_to_class_greedy(phi: &Signal, spec: &SignalClassSpec) -> Result<Signal> {
    if phi.len() != spec.len {
        return Err(Error::LengthMismatch {
            expected: spec.len,
            found: phi.len(),
        });
    }
    let l = spec.len;
    let mut used = vec![false; l];
    let mut kept: Vec<usize> = Vec::with_capacity(spec.sparsity);
    for i in magnitude_order(phi) {
        if kept.len() == spec.sparsity {
            break;
        }
        if try_claim(&kept, i, l, &mut used) {
            kept.push(i);
        }
    }
    if kept.len() < spec.sparsity {
        return Err(Error::Precondition(
            "greedy projection could not complete a collision-free support".into(),
        ));
    }
    let mut out = vec![0.0; l];
    for &i in &kept {
        let v = phi.values()[i];
        out[i] = spec.clip(if v == 0.0 { spec.m_lo } else { v });
    }
    Signal::new(out)
}

fn magnitude_order(phi: &Signal) -> Vec<usize> {
    let mut order: Vec<usize> = (0..phi.len()).collect();
    order.sort_by(|&a, &b| {
        phi.values()[b]
            .abs()
            .total_cmp(&phi.values()[a].abs())
            .then(a.cmp(&b))
    });
    order
}
