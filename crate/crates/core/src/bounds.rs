//! Evaluatable divergence bounds: the moment-series sandwich for the KL
//! divergence, its explicit upper remainder, the quadratic-test lower bound,
//! two-point minimax calculus, chi-square tails and sparse net sizes.
//!
//! Unknown universal constants are explicit inputs and recorded in each
//! report's `constant_policy`.

use std::collections::BTreeMap;

use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hermite::factorial;
use crate::model::{batch_means, sample_observations, McEstimate, NoiseSpec, ShiftKernel};
use crate::moments::{moment_difference_norm_sq, population_moment};
use crate::rng::{self, CHUNK};
use crate::signal::{first_collision_free_support, rho_distance, Signal, SignalClassSpec};

/// Which side of the bounded quantity a report sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Lower,
    Upper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub name: String,
    pub value: f64,
    pub inputs: BTreeMap<String, f64>,
    pub side: Side,
    pub constant_policy: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl BoundReport {
    fn new(name: &str, side: Side, value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::InvalidInput(format!("{name} evaluated to {value}")));
        }
        Ok(Self {
            name: name.into(),
            value,
            inputs: BTreeMap::new(),
            side,
            constant_policy: BTreeMap::new(),
            flags: Vec::new(),
        })
    }

    fn input(mut self, key: &str, v: f64) -> Self {
        self.inputs.insert(key.into(), v);
        self
    }

    fn constant(mut self, key: &str, v: f64) -> Self {
        self.constant_policy.insert(key.into(), v);
        self
    }

    /// True when `observed` respects the bound with `slack` of room.
    pub fn holds(&self, observed: f64, slack: f64) -> bool {
        match self.side {
            Side::Lower => observed >= self.value - slack,
            Side::Upper => observed <= self.value + slack,
        }
    }
}

fn check_pair(theta: &Signal, phi: &Signal) -> Result<()> {
    if theta.len() != phi.len() {
        return Err(Error::LengthMismatch {
            expected: theta.len(),
            found: phi.len(),
        });
    }
    Ok(())
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{name} must be positive and finite, got {v}")))
    }
}

// ------------------------------------------------------------ moment series ---

/// Terms `||Delta_m||^2 / ((base sigma^2)^m m!)` for `m = 1..=k_max`.
pub fn moment_series_terms(theta: &Signal, phi: &Signal, sigma: f64, k_max: usize, base: f64) -> Result<Vec<f64>> {
    check_pair(theta, phi)?;
    positive("sigma", sigma)?;
    positive("base", base)?;
    if !(1..=3).contains(&k_max) {
        return Err(Error::InvalidInput(format!(
            "k_max must be 1, 2 or 3 (tensors above order 3 are not built), got {k_max}"
        )));
    }
    (1..=k_max)
        .map(|m| {
            let d = moment_difference_norm_sq(theta, phi, m)?;
            Ok(d / ((base * sigma * sigma).powi(m as i32) * factorial(m)))
        })
        .collect()
}

/// `sum_{m=1}^{k_max} ||Delta_m||^2 / ((base sigma^2)^m m!)`.
pub fn moment_series(theta: &Signal, phi: &Signal, sigma: f64, k_max: usize, base: f64) -> Result<f64> {
    Ok(moment_series_terms(theta, phi, sigma, k_max, base)?.iter().sum())
}

/// Envelope for the omitted terms `m > k_max` of the series, from
/// `||Delta_m||^2 <= 12 * 18^m K0^{2m} rho^2 ||theta||^{2m-2}` with
/// `K0 = max(1, rho / ||theta||)`.
pub fn moment_series_tail_envelope(theta: &Signal, phi: &Signal, sigma: f64, k_max: usize, base: f64) -> Result<f64> {
    check_pair(theta, phi)?;
    positive("sigma", sigma)?;
    positive("base", base)?;
    let t = theta.norm();
    if t == 0.0 {
        return Ok(0.0);
    }
    let rho = rho_distance(theta, phi)?.value;
    let k0 = (rho / t).max(1.0);
    let a = 18.0 * k0 * k0 * t * t / (base * sigma * sigma);
    let head: f64 = (0..=k_max).map(|m| a.powi(m as i32) / factorial(m)).sum();
    Ok(12.0 * (rho / t).powi(2) * (a.exp() - head).max(0.0))
}

/// Default remainder constant `12 exp(2 K0^2 / s^2 + 18 K0^2)` with `s` the
/// noise level in units of `||theta||`.
pub fn default_remainder_constant(k0: f64, sigma_rel: f64) -> f64 {
    12.0 * (2.0 * k0 * k0 / (sigma_rel * sigma_rel) + 18.0 * k0 * k0).exp()
}

/// Upper bound on `KL(P_theta || P_phi)` for mean-zero signals:
/// `2 sum_{m<k} ||Delta_m||^2 / (sigma^{2m} m!) + C ||theta||^{2k-2} rho^2 / sigma^{2k}`.
/// `c_bar = None` uses [`default_remainder_constant`].
pub fn kl_upper_bound(
    theta: &Signal,
    phi: &Signal,
    sigma: f64,
    k: usize,
    c_bar: Option<f64>,
    k0: f64,
) -> Result<BoundReport> {
    check_pair(theta, phi)?;
    positive("sigma", sigma)?;
    positive("K0", k0)?;
    if !(1..=4).contains(&k) {
        return Err(Error::Precondition(format!("k must be in 1..=4, got {k}")));
    }
    let t = theta.norm();
    let scale = t.max(phi.norm()).max(1.0);
    for (name, s) in [("theta", theta), ("phi", phi)] {
        if s.mean().abs() > 1e-12 * scale {
            return Err(Error::Precondition(format!("{name} is not mean-zero (mean {:.3e})", s.mean())));
        }
    }
    if t > sigma {
        return Err(Error::Precondition(format!("||theta|| = {t} exceeds sigma = {sigma}")));
    }
    let rho = rho_distance(theta, phi)?.value;
    if rho > k0 * t * (1.0 + 1e-12) {
        return Err(Error::Precondition(format!("rho = {rho} exceeds K0 ||theta|| = {}", k0 * t)));
    }
    let mut head = 0.0;
    for m in 1..k {
        head += moment_difference_norm_sq(theta, phi, m)? / (sigma.powi(2 * m as i32) * factorial(m));
    }
    let (c, policy) = match c_bar {
        Some(c) => {
            positive("C_bar", c)?;
            (c, "supplied")
        }
        None if t > 0.0 => (default_remainder_constant(k0, sigma / t), "explicit-remainder"),
        None => (0.0, "explicit-remainder"),
    };
    let remainder = if t > 0.0 {
        c * t.powi(2 * k as i32 - 2) * rho * rho / sigma.powi(2 * k as i32)
    } else {
        0.0
    };
    let mut r = BoundReport::new("kl_upper", Side::Upper, 2.0 * head + remainder)?
        .input("sigma", sigma)
        .input("k", k as f64)
        .input("rho", rho)
        .input("theta_norm", t)
        .input("series_head", head)
        .input("remainder", remainder)
        .constant("C_bar", c)
        .constant("K0", k0);
    r.flags.push(format!("C_bar:{policy}"));
    Ok(r)
}

/// Lower bound `sqrt(2 eps / (2 + eps)) sqrt(s / L) rho` on `||Delta_2||_F`
/// for collision-free class members.
pub fn delta2_lower_bound(theta: &Signal, phi: &Signal, spec: &SignalClassSpec) -> Result<BoundReport> {
    check_pair(theta, phi)?;
    if theta.len() != spec.len {
        return Err(Error::LengthMismatch {
            expected: spec.len,
            found: theta.len(),
        });
    }
    let rho = rho_distance(theta, phi)?.value;
    let eps = spec.eps;
    let value = (2.0 * eps / (2.0 + eps)).sqrt() * (spec.sparsity as f64 / spec.len as f64).sqrt() * rho;
    Ok(BoundReport::new("delta2_lower", Side::Lower, value)?
        .input("rho", rho)
        .input("eps", eps)
        .input("s", spec.sparsity as f64)
        .input("L", spec.len as f64))
}

/// Donsker-Varadhan supremand for the test `f(x) = -lambda ||x||^2` with
/// `||theta|| = 1`: `lambda ||phi||^2 / (1 + 2 lambda s^2) + (L/2) log(1 + 2 lambda s^2) - lambda (1 + s^2 L)`.
pub fn quadratic_test_supremand(phi_norm_sq: f64, sigma: f64, len: usize, lambda: f64) -> f64 {
    let a = 2.0 * lambda * sigma * sigma;
    lambda * phi_norm_sq / (1.0 + a) + 0.5 * len as f64 * a.ln_1p() - lambda * (1.0 + sigma * sigma * len as f64)
}

/// Lower bound on `KL(P_theta || P_phi)` from the quadratic test. Inputs are
/// rescaled by `||theta||`; the rescaled pair needs `sigma >= 1` and
/// `||phi|| >= 2`. Reports the larger of the exact supremand at
/// `lambda = 1 / (4 sigma^4 L)` and the floor `||phi||^2 / (32 sigma^4 L)`.
pub fn kl_quadratic_test_lower(theta: &Signal, phi: &Signal, sigma: f64) -> Result<BoundReport> {
    check_pair(theta, phi)?;
    positive("sigma", sigma)?;
    let t = theta.norm();
    positive("||theta||", t)?;
    let s = sigma / t;
    let p2 = phi.norm_sq() / (t * t);
    if s < 1.0 {
        return Err(Error::Precondition(format!("sigma / ||theta|| = {s} is below 1")));
    }
    if p2 < 4.0 {
        return Err(Error::Precondition(format!(
            "||phi|| / ||theta|| = {} is below 2",
            p2.sqrt()
        )));
    }
    let l = theta.len();
    let lambda = 1.0 / (4.0 * s.powi(4) * l as f64);
    let sup = quadratic_test_supremand(p2, s, l, lambda);
    let floor = p2 / (32.0 * s.powi(4) * l as f64);
    Ok(BoundReport::new("kl_quadratic_test", Side::Lower, sup.max(floor))?
        .input("sigma_rel", s)
        .input("phi_norm_rel", p2.sqrt())
        .input("lambda", lambda)
        .input("supremand", sup)
        .input("floor", floor))
}

// ------------------------------------------------------------- two points ---

/// Two-point construction for the minimax lower bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeCamPair {
    pub phi: Signal,
    pub theta_n: Signal,
    pub delta: f64,
    pub support: Vec<usize>,
    /// Exact orbit distance.
    pub rho: f64,
    /// `||phi - theta_n||` before minimizing over shifts, `sqrt(2) delta`.
    pub aligned_distance: f64,
    /// The separation `2 delta` claimed for the construction.
    pub stated_separation: f64,
}

/// `phi` alternates `+-1/sqrt(s)` on a collision-free support; `theta_n` pushes
/// the last two entries `delta = c min(sigma^2 / sqrt(n), 1)` further from 0.
/// Both are mean-zero because `s` is even.
pub fn lecam_construct(spec: &SignalClassSpec, sigma: f64, n: usize, c: f64) -> Result<LeCamPair> {
    let (l, s) = (spec.len, spec.sparsity);
    if s < 2 || s % 2 == 1 {
        return Err(Error::Precondition(format!("s must be even and at least 2, got {s}")));
    }
    positive("sigma", sigma)?;
    positive("c", c)?;
    if n == 0 {
        return Err(Error::InvalidInput("n must be positive".into()));
    }
    let mut support = first_collision_free_support(l, s)?;
    support.sort_unstable();
    let a = 1.0 / (s as f64).sqrt();
    // k = 1..=s carries (-1)^k / sqrt(s)
    let base: Vec<f64> = (1..=s).map(|k| if k % 2 == 0 { a } else { -a }).collect();
    let delta = c * (sigma * sigma / (n as f64).sqrt()).min(1.0);
    let mut pert = base.clone();
    pert[s - 2] -= delta;
    pert[s - 1] += delta;
    let phi = Signal::from_support(l, &support, &base)?;
    let theta_n = Signal::from_support(l, &support, &pert)?;
    let rho = rho_distance(&phi, &theta_n)?.value;
    let aligned_distance = phi.sub(&theta_n)?.norm();
    Ok(LeCamPair {
        phi,
        theta_n,
        delta,
        support,
        rho,
        aligned_distance,
        stated_separation: 2.0 * delta,
    })
}

/// `max(0, rho (2 - sqrt(2 n KL)) / 8)`.
pub fn lecam_bound(rho_sep: f64, kl_per_sample: f64, n: usize) -> Result<f64> {
    if !(rho_sep >= 0.0 && kl_per_sample >= 0.0) {
        return Err(Error::InvalidInput("separation and divergence must be nonnegative".into()));
    }
    Ok((rho_sep * (2.0 - (2.0 * n as f64 * kl_per_sample).sqrt()) / 8.0).max(0.0))
}

// ------------------------------------------------------------------- tails ---

/// Chi-square deviations: `X - k >= 2 sqrt(k x) + 2x` and `k - X >= 2 sqrt(k x)`
/// each have probability at most `exp(-x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareTail {
    pub upper_dev: f64,
    pub lower_dev: f64,
    pub prob_bound: f64,
}

pub fn chi_square_tail(k: usize, x: f64) -> Result<ChiSquareTail> {
    if k == 0 || !(x >= 0.0) || !x.is_finite() {
        return Err(Error::InvalidInput(format!("need k >= 1 and x >= 0, got k={k}, x={x}")));
    }
    let r = 2.0 * (k as f64 * x).sqrt();
    Ok(ChiSquareTail {
        upper_dev: r + 2.0 * x,
        lower_dev: r,
        prob_bound: (-x).exp(),
    })
}

/// Monte Carlo frequencies of the upper and lower deviation events.
pub fn chi_square_tail_mc(k: usize, x: f64, n_mc: usize, seed: u64) -> Result<(McEstimate, McEstimate)> {
    let t = chi_square_tail(k, x)?;
    if n_mc < 100 {
        return Err(Error::InvalidInput(format!("n_mc must be at least 100, got {n_mc}")));
    }
    let dist = ChiSquared::new(k as f64).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut up = vec![0.0; n_mc];
    let mut lo = vec![0.0; n_mc];
    up.par_chunks_mut(CHUNK)
        .zip(lo.par_chunks_mut(CHUNK))
        .enumerate()
        .for_each(|(c, (u, d))| {
            let mut rng = rng::stream(seed, &[0xc5, c as u64]);
            for (ui, di) in u.iter_mut().zip(d.iter_mut()) {
                let v: f64 = dist.sample(&mut rng);
                *ui = f64::from(u8::from(v - k as f64 >= t.upper_dev));
                *di = f64::from(u8::from(k as f64 - v >= t.lower_dev));
            }
        });
    Ok((batch_means(&up), batch_means(&lo)))
}

/// Right-hand side `C_s sigma^{5s} delta^{-2s} exp(-C~_s n delta^4 / sigma^12)`
/// of the concentration inequality for the restricted MLE. Flags
/// `outside-regime` when `n < C_s sigma^12 / delta^4` and `constants-unset`
/// when both constants are the default 1.
pub fn tail_probability_bound(
    spec: &SignalClassSpec,
    sigma: f64,
    n: usize,
    delta: f64,
    c_s: f64,
    c_tilde_s: f64,
) -> Result<BoundReport> {
    positive("sigma", sigma)?;
    positive("C_s", c_s)?;
    positive("C~_s", c_tilde_s)?;
    let dmax = 2.0 * (spec.len as f64).sqrt() * spec.m_hi;
    if !(delta > 0.0 && delta < dmax) {
        return Err(Error::InvalidInput(format!("delta must lie in (0, {dmax}), got {delta}")));
    }
    let s = spec.sparsity as f64;
    let log_v = c_s.ln() + 5.0 * s * sigma.ln() - 2.0 * s * delta.ln()
        - c_tilde_s * n as f64 * delta.powi(4) / sigma.powi(12);
    let mut r = BoundReport::new("tail_probability", Side::Upper, log_v.exp())?
        .input("sigma", sigma)
        .input("n", n as f64)
        .input("delta", delta)
        .input("log_value", log_v)
        .constant("C_s", c_s)
        .constant("C_tilde_s", c_tilde_s);
    if (n as f64) < c_s * sigma.powi(12) / delta.powi(4) {
        r.flags.push("outside-regime".into());
    }
    if c_s == 1.0 && c_tilde_s == 1.0 {
        r.flags.push("constants-unset".into());
    }
    Ok(r)
}

/// `||Delta_m||^2 <= 12 * 18^m K0^{2m} rho^2` for `||theta|| = 1` and
/// `rho <= K0`, with `K0 >= 1`.
pub fn moment_difference_upper(theta: &Signal, phi: &Signal, k0: f64, m: usize) -> Result<BoundReport> {
    check_pair(theta, phi)?;
    if !(1..=3).contains(&m) {
        return Err(Error::Precondition(format!("m must be 1, 2 or 3, got {m}")));
    }
    if !(k0 >= 1.0 && k0.is_finite()) {
        return Err(Error::Precondition(format!("K0 must be at least 1, got {k0}")));
    }
    if (theta.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::Precondition(format!("||theta|| = {} is not 1", theta.norm())));
    }
    let rho = rho_distance(theta, phi)?.value;
    if rho > k0 {
        return Err(Error::Precondition(format!("rho = {rho} exceeds K0 = {k0}")));
    }
    let value = 12.0 * 18f64.powi(m as i32) * k0.powi(2 * m as i32) * rho * rho;
    Ok(BoundReport::new("moment_difference_upper", Side::Upper, value)?
        .input("m", m as f64)
        .input("rho", rho)
        .constant("K0", k0))
}

// -------------------------------------------------------------------- nets ---

/// `L^s (3K / delta)^s`, with its logarithm for when the value overflows.
pub fn net_cardinality_bound(len: usize, s: usize, k: f64, delta: f64) -> Result<(f64, f64)> {
    positive("K", k)?;
    positive("delta", delta)?;
    if len == 0 {
        return Err(Error::InvalidInput("L must be positive".into()));
    }
    let log_v = s as f64 * ((len as f64).ln() + (3.0 * k / delta).ln());
    Ok((log_v.exp(), log_v))
}

/// Largest net [`sparse_net`] will build.
pub const NET_POINT_BUDGET: usize = 2_000_000;

/// A `delta`-net of `{phi : |supp phi| <= s, ||phi|| <= K}`: on every support
/// a cubic grid of spacing `2 delta / sqrt(s)`, keeping only the cells that
/// meet the ball. Points are deduplicated across supports.
pub fn sparse_net(len: usize, s: usize, k: f64, delta: f64) -> Result<Vec<Vec<f64>>> {
    positive("K", k)?;
    positive("delta", delta)?;
    if s == 0 || s > len {
        return Err(Error::InvalidInput(format!("need 1 <= s <= L, got s={s}, L={len}")));
    }
    let h = 2.0 * delta / (s as f64).sqrt();
    // cell centres c = (j + 1/2) h, j in [-J, J)
    let j_max = (k / h).ceil() as i64;
    let axis: Vec<f64> = (-j_max..j_max).map(|j| (j as f64 + 0.5) * h).collect();
    let mut cells: Vec<Vec<f64>> = Vec::new();
    let mut cur = Vec::with_capacity(s);
    fn grid(axis: &[f64], s: usize, h: f64, k: f64, cur: &mut Vec<f64>, out: &mut Vec<Vec<f64>>) {
        if cur.len() == s {
            // distance from the origin to the cell around `cur`
            let d2: f64 = cur.iter().map(|&c: &f64| (c.abs() - 0.5 * h).max(0.0).powi(2)).sum();
            if d2 <= k * k {
                out.push(cur.clone());
            }
            return;
        }
        for &a in axis {
            cur.push(a);
            grid(axis, s, h, k, cur, out);
            cur.pop();
        }
    }
    let per_support = (axis.len() as f64).powi(s as i32);
    let supports = binomial(len, s);
    if per_support * supports > NET_POINT_BUDGET as f64 {
        return Err(Error::BudgetExceeded(format!(
            "net would need up to {:.3e} points",
            per_support * supports
        )));
    }
    grid(&axis, s, h, k, &mut cur, &mut cells);
    let mut points = std::collections::BTreeSet::new();
    let mut idx: Vec<usize> = (0..s).collect();
    loop {
        for c in &cells {
            let mut p = vec![0.0; len];
            for (&i, &v) in idx.iter().zip(c) {
                p[i] = v;
            }
            points.insert(p.iter().map(|v| v.to_bits()).collect::<Vec<u64>>());
        }
        // next s-subset in lexicographic order
        let mut i = s;
        while i > 0 && idx[i - 1] == len - s + i - 1 {
            i -= 1;
        }
        if i == 0 {
            break;
        }
        idx[i - 1] += 1;
        for j in i..s {
            idx[j] = idx[j - 1] + 1;
        }
    }
    Ok(points
        .into_iter()
        .map(|bits| bits.into_iter().map(f64::from_bits).collect())
        .collect())
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).map(|i| (n - i) as f64 / (i + 1) as f64).product()
}

/// Largest distance from `probes` uniform points of the sparse `K`-ball
/// (uniform support, uniform point of the `s`-ball on it) to their nearest
/// net point.
pub fn net_covering_radius(net: &[Vec<f64>], len: usize, s: usize, k: f64, probes: usize, seed: u64) -> Result<f64> {
    if net.is_empty() {
        return Err(Error::InvalidInput("empty net".into()));
    }
    let mut rng = rng::stream(seed, &[0x2e7]);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let supp = rand::seq::index::sample(&mut rng, len, s).into_vec();
        let mut dir: Vec<f64> = (0..s).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let u: f64 = rand::Rng::random(&mut rng);
        let r = k * u.powf(1.0 / s as f64);
        dir.iter_mut().for_each(|v| *v *= r / norm);
        let mut p = vec![0.0; len];
        for (&i, &v) in supp.iter().zip(&dir) {
            p[i] = v;
        }
        let best = net
            .par_iter()
            .map(|q| q.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .reduce(|| f64::INFINITY, f64::min);
        worst = worst.max(best.sqrt());
    }
    Ok(worst)
}

// -------------------------------------------------------- polynomial test ---

/// `T_k(x) = sum_{m<=k} <Delta_m, H_m(x)> / ((3 sigma^2)^m m!)`. The tensor
/// contractions reduce to shift correlations: `<E[(G theta)^m], x^m>` is the
/// mean over shifts of `<R theta, x>^m`, and the trace corrections only need
/// `||theta||^2` and the mean of `theta`.
pub struct PolynomialTest {
    theta: ShiftKernel,
    phi: ShiftKernel,
    theta_mean: f64,
    phi_mean: f64,
    len: usize,
    sigma: f64,
    k: usize,
}

impl PolynomialTest {
    pub fn new(theta: &Signal, phi: &Signal, sigma: f64, k: usize) -> Result<Self> {
        check_pair(theta, phi)?;
        positive("sigma", sigma)?;
        if !(1..=3).contains(&k) {
            return Err(Error::InvalidInput(format!("k must be 1, 2 or 3, got {k}")));
        }
        Ok(Self {
            theta: ShiftKernel::new(theta),
            phi: ShiftKernel::new(phi),
            theta_mean: theta.mean(),
            phi_mean: phi.mean(),
            len: theta.len(),
            sigma,
            k,
        })
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.len {
            return Err(Error::LengthMismatch {
                expected: self.len,
                found: x.len(),
            });
        }
        let l = self.len as f64;
        let s2 = self.sigma * self.sigma;
        let sx: f64 = x.iter().sum();
        let mut ct = vec![0.0; self.len];
        let mut cp = vec![0.0; self.len];
        self.theta.correlate(x, &mut ct);
        self.phi.correlate(x, &mut cp);
        let power_gap = |p: i32| ct.iter().zip(&cp).map(|(a, b)| a.powi(p) - b.powi(p)).sum::<f64>() / l;
        let (nt, np) = (self.theta.norm_sq(), self.phi.norm_sq());
        let inner = [
            (self.theta_mean - self.phi_mean) * sx,
            power_gap(2) - s2 * (nt - np),
            power_gap(3) - 3.0 * s2 * (nt * self.theta_mean - np * self.phi_mean) * sx,
        ];
        Ok(inner[..self.k]
            .iter()
            .enumerate()
            .map(|(i, v)| v / ((3.0 * s2).powi(i as i32 + 1) * factorial(i + 1)))
            .sum())
    }
}

/// Monte Carlo `E_theta[T_k] - E_phi[T_k]` against the base-3 series it should
/// equal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolynomialTestCheck {
    pub difference: McEstimate,
    pub series: f64,
}

pub fn polynomial_test_identity(
    theta: &Signal,
    phi: &Signal,
    sigma: f64,
    k: usize,
    n_mc: usize,
    seed: u64,
) -> Result<PolynomialTestCheck> {
    let test = PolynomialTest::new(theta, phi, sigma, k)?;
    let noise = NoiseSpec::new(sigma)?;
    let mean_of = |signal: &Signal, tag: u64| -> Result<McEstimate> {
        let samples = sample_observations(signal, noise, n_mc, rng::derive_seed(seed, &[tag]))?;
        let vals: Vec<f64> = samples
            .data()
            .par_chunks(samples.len_signal())
            .map(|x| test.eval(x).expect("lengths match"))
            .collect();
        Ok(batch_means(&vals))
    };
    let a = mean_of(theta, 1)?;
    let b = mean_of(phi, 2)?;
    Ok(PolynomialTestCheck {
        difference: McEstimate {
            estimate: a.estimate - b.estimate,
            std_error: a.std_error.hypot(b.std_error),
        },
        series: moment_series(theta, phi, sigma, k, 3.0)?,
    })
}

/// `||Delta_2(theta, phi)||_F` from dense tensors; exact zero for orbit pairs.
pub fn delta2_norm(theta: &Signal, phi: &Signal) -> Result<f64> {
    check_pair(theta, phi)?;
    Ok(population_moment(theta, 2)?
        .sub(&population_moment(phi, 2)?)?
        .frobenius_norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::kl_monte_carlo;
    use crate::moments::center_signal;
    use crate::signal::sample_class_signal;
    use rand::SeedableRng;

    fn gaussian_signal(len: usize, seed: u64) -> Signal {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Signal::new((0..len).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn series_vanishes_on_equal_and_drops_first_term_when_centred() {
        let theta = center_signal(&gaussian_signal(6, 1));
        let phi = center_signal(&gaussian_signal(6, 2));
        assert_eq!(moment_series(&theta, &theta, 2.0, 3, 3.0).unwrap(), 0.0);
        let terms = moment_series_terms(&theta, &phi, 2.0, 3, 3.0).unwrap();
        assert!(terms[0].abs() < 1e-28);
        assert!(terms[1] > 0.0);
        assert!(moment_series(&theta, &phi, 2.0, 4, 3.0).is_err());
    }

    #[test]
    fn series_scaling_in_sigma() {
        let theta = gaussian_signal(5, 3);
        let phi = gaussian_signal(5, 4);
        let a = moment_series_terms(&theta, &phi, 1.5, 3, 1.0).unwrap();
        let b = moment_series_terms(&theta, &phi, 3.0, 3, 1.0).unwrap();
        for (m, (x, y)) in a.iter().zip(&b).enumerate() {
            let ratio = y / x;
            assert!((ratio - 4f64.powi(-(m as i32 + 1))).abs() < 1e-12 * ratio);
        }
    }

    #[test]
    fn upper_bound_structure() {
        let theta = center_signal(&gaussian_signal(6, 5));
        let r = kl_upper_bound(&theta, &theta, 4.0, 2, None, 3.0).unwrap();
        assert_eq!(r.value, 0.0);
        let mut phi = theta.values().to_vec();
        phi[0] += 0.1;
        phi[1] -= 0.1;
        let phi = Signal::new(phi).unwrap();
        let r = kl_upper_bound(&theta, &phi, 4.0, 2, Some(2.0), 3.0).unwrap();
        let rho = rho_distance(&theta, &phi).unwrap().value;
        let want = 2.0 * theta.norm_sq() * rho * rho / 4f64.powi(4);
        assert!((r.value - want).abs() < 1e-12 * want);
        assert_eq!(r.constant_policy["C_bar"], 2.0);
        // preconditions
        assert!(kl_upper_bound(&gaussian_signal(6, 5), &phi, 4.0, 2, None, 3.0).is_err());
        assert!(kl_upper_bound(&theta, &phi, 0.1, 2, None, 3.0).is_err());
        assert!(kl_upper_bound(&theta, &phi, 4.0, 5, None, 3.0).is_err());
        let far = theta.scaled(-5.0);
        assert!(kl_upper_bound(&theta, &far, 40.0, 2, None, 3.0).is_err());
    }

    #[test]
    fn default_remainder_constant_value() {
        let c = default_remainder_constant(1.0, 1.0);
        assert!((c - 12.0 * 20f64.exp()).abs() < 1e-6 * c);
    }

    #[test]
    fn delta2_lower_example() {
        let spec = SignalClassSpec::relaxed(43, 7, 0.75, 1.0, 0.1).unwrap();
        // rho = 0.2 exactly between two aligned signals
        let theta = Signal::from_support(43, &[0], &[1.0]).unwrap();
        let phi = Signal::from_support(43, &[0], &[1.2]).unwrap();
        let r = delta2_lower_bound(&theta, &phi, &spec).unwrap();
        let want = (0.2f64 / 2.1).sqrt() * (7.0f64 / 43.0).sqrt() * 0.2;
        assert!((r.value - want).abs() < 1e-12);
        assert!((r.value - 0.02489).abs() < 5e-5);
        assert_eq!(delta2_lower_bound(&theta, &theta, &spec).unwrap().value, 0.0);
    }

    #[test]
    fn delta2_lower_bound_holds_on_class_pairs() {
        let spec = SignalClassSpec::default();
        for k in 0..20 {
            let theta = sample_class_signal(&spec, 300 + k).unwrap();
            let phi = sample_class_signal(&spec, 400 + k).unwrap();
            let r = delta2_lower_bound(&theta, &phi, &spec).unwrap();
            let d2 = moment_difference_norm_sq(&theta, &phi, 2).unwrap().sqrt();
            assert!(r.holds(d2, 0.0), "pair {k}: {d2} < {}", r.value);
        }
    }

    #[test]
    fn quadratic_test_floor_example_and_zero_lambda() {
        let theta = Signal::from_support(7, &[0], &[1.0]).unwrap();
        let phi = Signal::from_support(7, &[3], &[2.0]).unwrap();
        let r = kl_quadratic_test_lower(&theta, &phi, 1.0).unwrap();
        assert!((r.inputs["floor"] - 1.0 / 56.0).abs() < 1e-15);
        assert!(r.value >= r.inputs["floor"]);
        assert_eq!(quadratic_test_supremand(4.0, 1.0, 7, 0.0), 0.0);
        let small = Signal::from_support(7, &[3], &[1.5]).unwrap();
        assert!(kl_quadratic_test_lower(&theta, &small, 1.0).is_err());
        assert!(kl_quadratic_test_lower(&theta, &phi, 0.5).is_err());
    }

    #[test]
    fn quadratic_test_bound_sits_below_monte_carlo() {
        let theta = center_signal(&gaussian_signal(5, 7));
        let phi = theta.scaled(-3.0);
        let sigma = 1.2 * theta.norm();
        let r = kl_quadratic_test_lower(&theta, &phi, sigma).unwrap();
        let kl = kl_monte_carlo(&theta, &phi, sigma, 50_000, 1).unwrap();
        assert!(r.holds(kl.estimate, 3.0 * kl.std_error), "{kl:?} vs {}", r.value);
    }

    #[test]
    fn two_point_construction() {
        let spec = SignalClassSpec::relaxed(57, 8, 0.1, 1.0, 0.1).unwrap();
        let p = lecam_construct(&spec, 2.0, 10_000, 0.1).unwrap();
        assert!(p.phi.mean().abs() < 1e-15);
        assert!(p.theta_n.mean().abs() < 1e-15);
        assert!((p.phi.norm() - 1.0).abs() < 1e-12);
        assert!((p.delta - 0.004).abs() < 1e-15);
        assert!((p.aligned_distance - 2f64.sqrt() * p.delta).abs() < 1e-12);
        assert!((p.rho - p.aligned_distance).abs() < 1e-12);
        assert_eq!(p.stated_separation, 2.0 * p.delta);
        let odd = SignalClassSpec::relaxed(57, 7, 0.1, 1.0, 0.1).unwrap();
        assert!(lecam_construct(&odd, 2.0, 100, 0.1).is_err());
    }

    #[test]
    fn two_point_bound_arithmetic() {
        for r in [0.0, 0.3, 7.0] {
            for n in [1, 100, 1_000_000] {
                assert_eq!(lecam_bound(r, 0.0, n).unwrap(), r / 4.0);
            }
        }
        assert!((lecam_bound(0.8, 0.5, 1).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(lecam_bound(0.8, 1.0, 2).unwrap(), 0.0);
        assert!(lecam_bound(-1.0, 0.0, 1).is_err());
    }

    #[test]
    fn chi_square_thresholds() {
        let t = chi_square_tail(1, 1.0).unwrap();
        assert_eq!(t.upper_dev, 4.0);
        assert_eq!(t.lower_dev, 2.0);
        assert!((t.prob_bound - 0.36787944117144233).abs() < 1e-15);
        let z = chi_square_tail(5, 0.0).unwrap();
        assert_eq!((z.upper_dev, z.lower_dev, z.prob_bound), (0.0, 0.0, 1.0));
        assert!(chi_square_tail(0, 1.0).is_err());
    }

    #[test]
    fn chi_square_tail_holds_by_sampling() {
        for x in [0.5, 1.0, 2.0] {
            let t = chi_square_tail(10, x).unwrap();
            let (up, lo) = chi_square_tail_mc(10, x, 100_000, 9).unwrap();
            assert!(up.estimate <= t.prob_bound + 3.0 * up.std_error);
            assert!(lo.estimate <= t.prob_bound + 3.0 * lo.std_error);
        }
    }

    #[test]
    fn net_cardinality_examples() {
        let (v, _) = net_cardinality_bound(10, 2, 3.0, 1.0).unwrap();
        assert!((v - 8100.0).abs() < 1e-9);
        let (v, _) = net_cardinality_bound(10, 3, 2.0, 6.0).unwrap();
        assert!((v - 1000.0).abs() < 1e-9);
        let (v, lv) = net_cardinality_bound(1000, 200, 10.0, 1e-3).unwrap();
        assert!(v.is_infinite() && lv.is_finite());
    }

    #[test]
    fn constructed_net_is_small_and_covers() {
        let (len, s, k, delta) = (10, 2, 3.0, 1.0);
        let net = sparse_net(len, s, k, delta).unwrap();
        let (bound, _) = net_cardinality_bound(len, s, k, delta).unwrap();
        assert!((net.len() as f64) <= bound);
        let r = net_covering_radius(&net, len, s, k, 1000, 4).unwrap();
        assert!(r <= delta, "covering radius {r}");
    }

    #[test]
    fn tail_bound_monotonicity_and_flags() {
        let spec = SignalClassSpec::default();
        let a = tail_probability_bound(&spec, 2.0, 1000, 0.5, 1.0, 1.0).unwrap();
        let b = tail_probability_bound(&spec, 2.0, 4000, 0.5, 1.0, 1.0).unwrap();
        assert!(b.value < a.value);
        assert!(a.flags.contains(&"constants-unset".to_string()));
        assert!(a.flags.contains(&"outside-regime".to_string()));
        let c = tail_probability_bound(&spec, 2.0, 1000, 0.6, 1.0, 1.0).unwrap();
        assert!(c.value < a.value);
        assert!(tail_probability_bound(&spec, 2.0, 1000, 100.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn moment_difference_upper_examples() {
        let theta = Signal::from_support(5, &[0], &[1.0]).unwrap();
        let phi = Signal::from_support(5, &[0], &[1.1]).unwrap();
        let r = moment_difference_upper(&theta, &phi, 1.0, 1).unwrap();
        assert!((r.value - 2.16).abs() < 1e-12);
        assert_eq!(moment_difference_upper(&theta, &theta, 1.0, 2).unwrap().value, 0.0);
        assert!(moment_difference_upper(&theta.scaled(2.0), &phi, 1.0, 1).is_err());
        assert!(moment_difference_upper(&theta, &phi, 1.0, 4).is_err());
        let far = Signal::from_support(5, &[0], &[-3.0]).unwrap();
        assert!(moment_difference_upper(&theta, &far, 1.0, 1).is_err());
    }

    #[test]
    fn moment_difference_upper_holds_on_unit_pairs() {
        for k in 0..30 {
            let t = gaussian_signal(6, 500 + k);
            let theta = t.scaled(1.0 / t.norm());
            let phi = gaussian_signal(6, 600 + k).scaled(0.5);
            let k0 = rho_distance(&theta, &phi).unwrap().value.max(1.0);
            for m in 1..=3 {
                let r = moment_difference_upper(&theta, &phi, k0, m).unwrap();
                assert!(r.holds(moment_difference_norm_sq(&theta, &phi, m).unwrap(), 0.0));
            }
        }
    }

    #[test]
    fn delta2_vanishes_exactly_on_orbits() {
        let spec = SignalClassSpec::default();
        let theta = sample_class_signal(&spec, 1).unwrap();
        for g in [0, 5, 56] {
            assert_eq!(delta2_norm(&theta, &theta.shifted(g)).unwrap(), 0.0);
            assert_eq!(delta2_norm(&theta, &theta.shifted(g).negated()).unwrap(), 0.0);
        }
        let phi = sample_class_signal(&spec, 2).unwrap();
        assert!(delta2_norm(&theta, &phi).unwrap() > 0.0);
    }

    #[test]
    fn polynomial_test_matches_dense_contraction() {
        let theta = gaussian_signal(5, 21);
        let phi = gaussian_signal(5, 22);
        let x = gaussian_signal(5, 23);
        let sigma = 1.3;
        let test = PolynomialTest::new(&theta, &phi, sigma, 3).unwrap();
        let mut want = 0.0;
        for m in 1..=3 {
            let d = crate::moments::moment_difference(&theta, &phi, m).unwrap();
            want += crate::hermite::hermite_tensor_inner(&d, x.values(), sigma).unwrap()
                / ((3.0 * sigma * sigma).powi(m as i32) * factorial(m));
        }
        let got = test.eval(x.values()).unwrap();
        assert!((got - want).abs() < 1e-12 * want.abs().max(1.0), "{got} vs {want}");
    }

    #[test]
    fn polynomial_test_mean_gap_matches_series() {
        let theta = center_signal(&gaussian_signal(4, 11));
        let phi = center_signal(&gaussian_signal(4, 12));
        let sigma = 1.5 * theta.norm().max(phi.norm());
        let c = polynomial_test_identity(&theta, &phi, sigma, 3, 200_000, 5).unwrap();
        assert!(
            (c.difference.estimate - c.series).abs() <= 4.0 * c.difference.std_error,
            "{c:?}"
        );
    }

    proptest::proptest! {
        #[test]
        fn doubling_sigma_scales_terms_exactly(
            a in proptest::collection::vec(-2.0f64..2.0, 5),
            b in proptest::collection::vec(-2.0f64..2.0, 5),
            sigma in 0.5f64..8.0,
            base in proptest::sample::select(vec![1.0, 3.0]),
        ) {
            let (theta, phi) = (Signal::new(a).unwrap(), Signal::new(b).unwrap());
            let t1 = moment_series_terms(&theta, &phi, sigma, 3, base).unwrap();
            let t2 = moment_series_terms(&theta, &phi, 2.0 * sigma, 3, base).unwrap();
            for (m, (x, y)) in t1.iter().zip(&t2).enumerate() {
                proptest::prop_assert_eq!(x / 4f64.powi(m as i32 + 1), *y);
            }
        }

        #[test]
        fn zero_divergence_gives_a_quarter(r in 0.0f64..100.0, n in 1usize..10_000_000) {
            proptest::prop_assert_eq!(lecam_bound(r, 0.0, n).unwrap(), r / 4.0);
        }

        #[test]
        fn two_point_bound_shrinks_with_divergence(r in 0.0f64..10.0, kl in 0.0f64..1.0, n in 1usize..1000) {
            let a = lecam_bound(r, kl, n).unwrap();
            proptest::prop_assert!(a >= 0.0 && a <= r / 4.0);
            proptest::prop_assert!(lecam_bound(r, kl * 2.0, n).unwrap() <= a);
        }
    }

    #[test]
    fn tail_envelope_is_nonnegative_and_zero_on_equal() {
        let theta = gaussian_signal(5, 1);
        let phi = gaussian_signal(5, 2);
        assert!(moment_series_tail_envelope(&theta, &phi, 2.0, 3, 3.0).unwrap() > 0.0);
        assert_eq!(moment_series_tail_envelope(&theta, &theta, 2.0, 3, 3.0).unwrap(), 0.0);
    }
}
