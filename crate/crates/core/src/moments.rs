//! Shift-averaged moment tensors `E[(G theta)^{⊗m}]` for `m <= 3`, their
//! differences, bias-corrected empirical versions and the third-moment
//! centering decomposition.
//!
//! Tensors are stored densely in row-major order. Population tensors are
//! circulant, so they are built from the `L^{m-1}` values `c(d) = T[0, d...]`.
//! Each such value is a sum over `g` of products; the nonzero products are
//! sorted before summing so that shifting the signal (which only permutes the
//! products) leaves every entry bit-identical.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SampleSet;
use crate::rng::CHUNK;
use crate::signal::Signal;

/// Dense order-`m` tensor over Z/LZ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentTensor {
    len: usize,
    order: usize,
    entries: Vec<f64>,
}

fn check_order(order: usize) -> Result<()> {
    if !(1..=3).contains(&order) {
        return Err(Error::InvalidInput(format!("tensor order must be 1, 2 or 3, got {order}")));
    }
    Ok(())
}

impl MomentTensor {
    pub fn from_entries(len: usize, order: usize, entries: Vec<f64>) -> Result<Self> {
        check_order(order)?;
        let expected = len.pow(order as u32);
        if entries.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                found: entries.len(),
            });
        }
        Ok(Self { len, order, entries })
    }

    pub fn len_signal(&self) -> usize {
        self.len
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.order);
        idx.iter().fold(0, |acc, &i| acc * self.len + i % self.len)
    }

    /// Entry at a multi-index; indices are reduced mod `L`.
    pub fn get(&self, idx: &[usize]) -> f64 {
        assert_eq!(idx.len(), self.order, "index arity must equal tensor order");
        self.entries[self.offset(idx)]
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.entries.iter().map(|v| v * v).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sq().sqrt()
    }

    pub fn sub(&self, other: &MomentTensor) -> Result<MomentTensor> {
        if self.len != other.len || self.order != other.order {
            return Err(Error::InvalidInput("tensor shapes differ".into()));
        }
        Ok(MomentTensor {
            len: self.len,
            order: self.order,
            entries: self.entries.iter().zip(&other.entries).map(|(a, b)| a - b).collect(),
        })
    }

    /// Largest absolute entrywise difference.
    pub fn max_abs_diff(&self, other: &MomentTensor) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Root mean square entrywise difference.
    pub fn rms_diff(&self, other: &MomentTensor) -> f64 {
        let s: f64 = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        (s / self.entries.len() as f64).sqrt()
    }

    /// Circulant value `(1/L) sum_g T[g, g + d...]` of an order-3 tensor.
    pub fn diagonal_average3(&self, d1: usize, d2: usize) -> f64 {
        assert_eq!(self.order, 3);
        let l = self.len;
        (0..l)
            .map(|g| self.get(&[g, g + d1, g + d2]))
            .sum::<f64>()
            / l as f64
    }

    /// CSV with header `L,order`, a row with both values, then row-major
    /// entries one per line.
    pub fn to_csv(&self) -> String {
        let mut out = format!("L,order\n{},{}\n", self.len, self.order);
        for v in &self.entries {
            let _ = writeln!(out, "{v:.16e}");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<MomentTensor> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        if lines.next() != Some("L,order") {
            return Err(Error::Parse("expected header `L,order`".into()));
        }
        let meta = lines.next().ok_or_else(|| Error::Parse("missing shape row".into()))?;
        let (l, o) = meta
            .split_once(',')
            .ok_or_else(|| Error::Parse(format!("bad shape row `{meta}`")))?;
        let len: usize = l.parse().map_err(|_| Error::Parse(format!("bad L `{l}`")))?;
        let order: usize = o.parse().map_err(|_| Error::Parse(format!("bad order `{o}`")))?;
        let entries = lines
            .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("bad entry `{t}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        MomentTensor::from_entries(len, order, entries)
    }
}

/// Sum of the given terms in a canonical (sorted) order.
fn canonical_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// Population `c(d) = (1/L) sum_g prod_a theta(g + d_a)` with `d_0 = 0`, for all
/// `d in (Z/L)^{order-1}`, flattened row-major.
fn population_circulant(theta: &Signal, order: usize) -> Vec<f64> {
    let l = theta.len();
    let t = theta.values();
    let supp = theta.support();
    let lf = l as f64;
    match order {
        1 => vec![canonical_sum(supp.iter().map(|&g| t[g]).collect()) / lf],
        2 => (0..l)
            .map(|d| {
                let terms = supp
                    .iter()
                    .map(|&g| t[g] * t[(g + d) % l])
                    .filter(|p| *p != 0.0)
                    .collect();
                canonical_sum(terms) / lf
            })
            .collect(),
        _ => {
            let mut out = vec![0.0; l * l];
            for d1 in 0..l {
                for d2 in 0..l {
                    let terms = supp
                        .iter()
                        .map(|&g| t[g] * t[(g + d1) % l] * t[(g + d2) % l])
                        .filter(|p| *p != 0.0)
                        .collect();
                    out[d1 * l + d2] = canonical_sum(terms) / lf;
                }
            }
            out
        }
    }
}

/// Population third-order circulant value `T[0, d1, d2]`.
pub fn circulant_third_entry(theta: &Signal, d1: usize, d2: usize) -> f64 {
    let l = theta.len();
    let t = theta.values();
    let terms = theta
        .support()
        .iter()
        .map(|&g| t[g] * t[(g + d1) % l] * t[(g + d2) % l])
        .filter(|p| *p != 0.0)
        .collect();
    canonical_sum(terms) / l as f64
}

fn expand_circulant(l: usize, order: usize, c: &[f64]) -> Vec<f64> {
    match order {
        1 => vec![c[0]; l],
        2 => {
            let mut e = vec![0.0; l * l];
            for i in 0..l {
                for j in 0..l {
                    e[i * l + j] = c[(j + l - i) % l];
                }
            }
            e
        }
        _ => {
            let mut e = vec![0.0; l * l * l];
            e.par_chunks_mut(l * l).enumerate().for_each(|(i, slab)| {
                for j in 0..l {
                    let dj = (j + l - i) % l;
                    for k in 0..l {
                        slab[j * l + k] = c[dj * l + (k + l - i) % l];
                    }
                }
            });
            e
        }
    }
}

/// `E[(G theta)^{⊗m}]`, entry `(i_1..i_m) = (1/L) sum_g prod_a theta(i_a + g)`.
pub fn population_moment(theta: &Signal, order: usize) -> Result<MomentTensor> {
    check_order(order)?;
    let c = population_circulant(theta, order);
    MomentTensor::from_entries(theta.len(), order, expand_circulant(theta.len(), order, &c))
}

/// `Delta_m(theta, phi) = E[(G theta)^{⊗m}] - E[(G phi)^{⊗m}]`.
pub fn moment_difference(theta: &Signal, phi: &Signal, order: usize) -> Result<MomentTensor> {
    if theta.len() != phi.len() {
        return Err(Error::LengthMismatch {
            expected: theta.len(),
            found: phi.len(),
        });
    }
    population_moment(theta, order)?.sub(&population_moment(phi, order)?)
}

/// `||Delta_m||_F^2` computed from circulant values, without dense storage.
pub fn moment_difference_norm_sq(theta: &Signal, phi: &Signal, order: usize) -> Result<f64> {
    check_order(order)?;
    if theta.len() != phi.len() {
        return Err(Error::LengthMismatch {
            expected: theta.len(),
            found: phi.len(),
        });
    }
    let a = population_circulant(theta, order);
    let b = population_circulant(phi, order);
    let s: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
    let l = theta.len() as f64;
    // each circulant value fills L entries (order 1: L entries share one value)
    Ok(s * l)
}

fn packed3_len(l: usize) -> usize {
    l * (l + 1) * (l + 2) / 6
}

/// Bias-corrected empirical moment tensor:
/// order 1 is the sample mean, order 2 subtracts `sigma^2 I`, order 3 subtracts
/// `sigma^2 (delta_jk mu_i + delta_ik mu_j + delta_ij mu_k)`.
pub fn empirical_moment_corrected(samples: &SampleSet, order: usize) -> Result<MomentTensor> {
    check_order(order)?;
    let l = samples.len_signal();
    let n = samples.n() as f64;
    let s2 = samples.sigma() * samples.sigma();
    let mean = sample_mean(samples);
    match order {
        1 => MomentTensor::from_entries(l, 1, mean),
        2 => {
            let packed = packed_sum(samples, l * (l + 1) / 2, |x, acc| {
                let mut p = 0;
                for i in 0..l {
                    let xi = x[i];
                    for j in i..l {
                        acc[p] += xi * x[j];
                        p += 1;
                    }
                }
            });
            let mut e = vec![0.0; l * l];
            let mut p = 0;
            for i in 0..l {
                for j in i..l {
                    let mut v = packed[p] / n;
                    if i == j {
                        v -= s2;
                    }
                    e[i * l + j] = v;
                    e[j * l + i] = v;
                    p += 1;
                }
            }
            MomentTensor::from_entries(l, 2, e)
        }
        _ => {
            let packed = packed_sum(samples, packed3_len(l), |x, acc| {
                let mut p = 0;
                for i in 0..l {
                    let xi = x[i];
                    for j in i..l {
                        let xij = xi * x[j];
                        let row = &mut acc[p..p + (l - j)];
                        for (a, xk) in row.iter_mut().zip(&x[j..]) {
                            *a += xij * xk;
                        }
                        p += l - j;
                    }
                }
            });
            let mut e = vec![0.0; l * l * l];
            let mut p = 0;
            for i in 0..l {
                for j in i..l {
                    for k in j..l {
                        let mut v = packed[p] / n;
                        if j == k {
                            v -= s2 * mean[i];
                        }
                        if i == k {
                            v -= s2 * mean[j];
                        }
                        if i == j {
                            v -= s2 * mean[k];
                        }
                        for (a, b, c) in [(i, j, k), (i, k, j), (j, i, k), (j, k, i), (k, i, j), (k, j, i)] {
                            e[(a * l + b) * l + c] = v;
                        }
                        p += 1;
                    }
                }
            }
            MomentTensor::from_entries(l, 3, e)
        }
    }
}

fn sample_mean(samples: &SampleSet) -> Vec<f64> {
    let l = samples.len_signal();
    let mut m = packed_sum(samples, l, |x, acc| {
        for (a, v) in acc.iter_mut().zip(x) {
            *a += v;
        }
    });
    let n = samples.n() as f64;
    m.iter_mut().for_each(|v| *v /= n);
    m
}

/// Accumulates `f` over the sample in fixed chunks and sums the chunk partials
/// in chunk order.
fn packed_sum<F>(samples: &SampleSet, width: usize, f: F) -> Vec<f64>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    let l = samples.len_signal();
    let partials: Vec<Vec<f64>> = samples
        .data()
        .par_chunks(CHUNK * l)
        .map(|block| {
            let mut acc = vec![0.0; width];
            for x in block.chunks_exact(l) {
                f(x, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; width];
    for p in &partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// `theta - mean(theta) 1`.
pub fn center_signal(theta: &Signal) -> Signal {
    let m = theta.mean();
    Signal::new(theta.values().iter().map(|v| v - m).collect()).expect("finite input stays finite")
}

/// Average over the six index permutations of a raw `L x L x L` array.
pub fn symmetrize3(raw: &[f64], len: usize) -> Result<MomentTensor> {
    if raw.len() != len * len * len {
        return Err(Error::LengthMismatch {
            expected: len * len * len,
            found: raw.len(),
        });
    }
    let at = |a: usize, b: usize, c: usize| raw[(a * len + b) * len + c];
    let mut e = vec![0.0; raw.len()];
    for i in 0..len {
        for j in 0..len {
            for k in 0..len {
                e[(i * len + j) * len + k] =
                    (at(i, j, k) + at(i, k, j) + at(j, i, k) + at(j, k, i) + at(k, i, j) + at(k, j, i)) / 6.0;
            }
        }
    }
    MomentTensor::from_entries(len, 3, e)
}

/// Frobenius residual of the centering identity
/// `Delta_3(theta, phi) = Delta_3(theta_c, phi_c)
///   + 3 Sym(1 ⊗ (mean(theta) M2(theta_c) - mean(phi) M2(phi_c)))
///   + (mean(theta)^3 - mean(phi)^3) 1^{⊗3}`.
pub fn third_moment_decomposition_check(theta: &Signal, phi: &Signal) -> Result<f64> {
    let l = theta.len();
    let lhs = moment_difference(theta, phi, 3)?;
    let (tc, pc) = (center_signal(theta), center_signal(phi));
    let (tm, pm) = (theta.mean(), phi.mean());
    let d3c = moment_difference(&tc, &pc, 3)?;
    let m2t = population_moment(&tc, 2)?;
    let m2p = population_moment(&pc, 2)?;
    let mut raw = vec![0.0; l * l * l];
    for i in 0..l {
        for j in 0..l {
            for k in 0..l {
                raw[(i * l + j) * l + k] = tm * m2t.get(&[j, k]) - pm * m2p.get(&[j, k]);
            }
        }
    }
    let sym = symmetrize3(&raw, l)?;
    let cube = tm.powi(3) - pm.powi(3);
    let s: f64 = lhs
        .entries()
        .iter()
        .zip(d3c.entries())
        .zip(sym.entries())
        .map(|((a, b), c)| {
            let r = a - (b + 3.0 * c + cube);
            r * r
        })
        .sum();
    Ok(s.sqrt())
}

/// Source of circulant third-order values `T[0, d1, d2]`.
pub trait ThirdMomentSource {
    fn len_signal(&self) -> usize;
    fn circulant_entries(&self, pairs: &[(usize, usize)]) -> Vec<f64>;
}

impl ThirdMomentSource for MomentTensor {
    fn len_signal(&self) -> usize {
        self.len
    }

    fn circulant_entries(&self, pairs: &[(usize, usize)]) -> Vec<f64> {
        pairs.iter().map(|&(a, b)| self.diagonal_average3(a, b)).collect()
    }
}

/// Debiased circulant third-order values computed directly from samples,
/// `(1/(nL)) sum_i sum_g x_i(g) x_i(g+d1) x_i(g+d2)` minus
/// `sigma^2 mu ([d1 = d2] + [d1 = 0] + [d2 = 0])` with `mu` the grand mean.
/// Equals the diagonal average of [`empirical_moment_corrected`] at order 3
/// without building the dense tensor.
pub struct SampleThirdMoment<'a> {
    samples: &'a SampleSet,
    grand_mean: f64,
}

impl<'a> SampleThirdMoment<'a> {
    pub fn new(samples: &'a SampleSet) -> Self {
        let m = sample_mean(samples);
        let grand_mean = m.iter().sum::<f64>() / m.len() as f64;
        Self { samples, grand_mean }
    }

    pub fn grand_mean(&self) -> f64 {
        self.grand_mean
    }
}

impl ThirdMomentSource for SampleThirdMoment<'_> {
    fn len_signal(&self) -> usize {
        self.samples.len_signal()
    }

    fn circulant_entries(&self, pairs: &[(usize, usize)]) -> Vec<f64> {
        let l = self.samples.len_signal();
        let pairs: Vec<(usize, usize)> = pairs.iter().map(|&(a, b)| (a % l, b % l)).collect();
        let sums = packed_sum(self.samples, pairs.len(), |x, acc| {
            for (a, &(d1, d2)) in acc.iter_mut().zip(&pairs) {
                let mut s = 0.0;
                for g in 0..l {
                    let i1 = if g + d1 >= l { g + d1 - l } else { g + d1 };
                    let i2 = if g + d2 >= l { g + d2 - l } else { g + d2 };
                    s += x[g] * x[i1] * x[i2];
                }
                *a += s;
            }
        });
        let scale = 1.0 / (self.samples.n() as f64 * l as f64);
        let s2 = self.samples.sigma() * self.samples.sigma();
        pairs
            .iter()
            .zip(sums)
            .map(|(&(d1, d2), v)| {
                let hits = (d1 == d2) as u32 + (d1 == 0) as u32 + (d2 == 0) as u32;
                v * scale - s2 * self.grand_mean * hits as f64
            })
            .collect()
    }
}
