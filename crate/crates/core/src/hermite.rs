//! Probabilist's Hermite polynomials, their `sigma`-rescaled multivariate
//! versions and Gauss-Hermite quadrature for the standard normal measure.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{batch_means, McEstimate};
use crate::moments::MomentTensor;
use crate::rng::{self, CHUNK};

/// `h_k(x)` by the recurrence `h_{k+1} = x h_k - k h_{k-1}`.
pub fn hermite_eval(k: usize, x: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, x);
    if k == 0 {
        return prev;
    }
    for j in 1..k {
        let next = x * cur - j as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Multi-index over `d` coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HermiteIndex {
    pub alpha: Vec<usize>,
}

impl HermiteIndex {
    pub fn new(alpha: Vec<usize>) -> Self {
        Self { alpha }
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    /// `|alpha|`.
    pub fn order(&self) -> usize {
        self.alpha.iter().sum()
    }

    /// `alpha! = prod alpha_i!`.
    pub fn factorial(&self) -> f64 {
        self.alpha.iter().map(|&a| factorial(a)).product()
    }

    /// Every index of dimension `d` with `|alpha| <= max_order`, in
    /// lexicographic order.
    pub fn all_up_to(d: usize, max_order: usize) -> Vec<HermiteIndex> {
        let mut out = Vec::new();
        let mut cur = vec![0; d];
        fn rec(pos: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<HermiteIndex>) {
            if pos == cur.len() {
                out.push(HermiteIndex::new(cur.clone()));
                return;
            }
            for a in 0..=left {
                cur[pos] = a;
                rec(pos + 1, left - a, cur, out);
            }
            cur[pos] = 0;
        }
        rec(0, max_order, &mut cur, &mut out);
        out
    }
}

pub(crate) fn factorial(k: usize) -> f64 {
    (1..=k).map(|j| j as f64).product()
}

/// `H_alpha(x) = sigma^|alpha| prod_i h_{alpha_i}(x_i / sigma)`.
pub fn scaled_hermite_eval(alpha: &HermiteIndex, x: &[f64], sigma: f64) -> Result<f64> {
    if alpha.dim() != x.len() {
        return Err(Error::LengthMismatch {
            expected: alpha.dim(),
            found: x.len(),
        });
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidInput(format!("sigma must be positive, got {sigma}")));
    }
    Ok(alpha
        .alpha
        .iter()
        .zip(x)
        .map(|(&a, &xi)| sigma.powi(a as i32) * hermite_eval(a, xi / sigma))
        .product())
}

/// `n`-point Gauss-Hermite rule for `E f(Z)`, `Z ~ N(0, 1)`: nodes are the
/// roots of `h_n`, weights `n! / (n h_{n-1}(x_i))^2`. Exact for polynomials of
/// degree below `2n`.
pub fn gauss_hermite(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 || n > 60 {
        return Err(Error::InvalidInput(format!("rule size must be in 1..=60, got {n}")));
    }
    // roots of h_n lie inside (-2 sqrt(n), 2 sqrt(n)); bracket them on a grid
    let r = 2.0 * (n as f64).sqrt() + 1.0;
    let steps = 4000 * n;
    let mut nodes = Vec::with_capacity(n);
    let mut a = -r;
    let mut fa = hermite_eval(n, a);
    for k in 1..=steps {
        let b = -r + 2.0 * r * k as f64 / steps as f64;
        let fb = hermite_eval(n, b);
        if fa == 0.0 {
            nodes.push(a);
        } else if fa * fb < 0.0 {
            nodes.push(refine_root(n, a, b));
        }
        a = b;
        fa = fb;
    }
    if nodes.len() != n {
        return Err(Error::InvalidInput(format!("located {} of {n} Hermite roots", nodes.len())));
    }
    let nf = factorial(n);
    let weights = nodes
        .iter()
        .map(|&x| {
            let h = hermite_eval(n - 1, x);
            nf / (n as f64 * n as f64 * h * h)
        })
        .collect();
    Ok((nodes, weights))
}

fn refine_root(n: usize, mut lo: f64, mut hi: f64) -> f64 {
    let flo = hermite_eval(n, lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = hermite_eval(n, mid);
        if fm == 0.0 || hi - lo < 1e-15 * mid.abs().max(1.0) {
            return mid;
        }
        if (fm < 0.0) == (flo < 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Newton polish; h_n' = n h_{n-1}
    let mut x = 0.5 * (lo + hi);
    for _ in 0..3 {
        let d = n as f64 * hermite_eval(n - 1, x);
        if d != 0.0 {
            x -= hermite_eval(n, x) / d;
        }
    }
    x
}

/// `E f(mu + sigma Z)` for `Z ~ N(0, 1)` by an `n`-point rule.
pub fn normal_expectation(f: impl Fn(f64) -> f64, mu: f64, sigma: f64, n: usize) -> Result<f64> {
    let (x, w) = gauss_hermite(n)?;
    Ok(x.iter().zip(&w).map(|(&xi, &wi)| wi * f(mu + sigma * xi)).sum())
}

/// Monte Carlo estimate of `E[H_alpha(Z) H_beta(Z)]`, `Z ~ N(0, sigma^2 I)`.
pub fn hermite_product_mc(
    alpha: &HermiteIndex,
    beta: &HermiteIndex,
    sigma: f64,
    n_mc: usize,
    seed: u64,
) -> Result<McEstimate> {
    let d = alpha.dim();
    if beta.dim() != d {
        return Err(Error::LengthMismatch {
            expected: d,
            found: beta.dim(),
        });
    }
    if n_mc < 100 {
        return Err(Error::InvalidInput(format!("n_mc must be at least 100, got {n_mc}")));
    }
    scaled_hermite_eval(alpha, &vec![0.0; d], sigma)?;
    let mut vals = vec![0.0; n_mc];
    vals.par_chunks_mut(CHUNK).enumerate().for_each(|(c, out)| {
        let mut rng = rng::stream(seed, &[0x4e, c as u64]);
        let mut z = vec![0.0; d];
        for o in out.iter_mut() {
            for zi in z.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *zi = sigma * e;
            }
            let a = scaled_hermite_eval(alpha, &z, sigma).expect("dimensions checked");
            let b = scaled_hermite_eval(beta, &z, sigma).expect("dimensions checked");
            *o = a * b;
        }
    });
    Ok(batch_means(&vals))
}

/// `<S, H_m(x)>` for a full order-`m` tensor `S` over `R^L`, where entry
/// `(i_1..i_m)` of `H_m(x)` is `H_alpha(x)` for the multiplicities `alpha` of
/// the tuple.
pub fn hermite_tensor_inner(s: &MomentTensor, x: &[f64], sigma: f64) -> Result<f64> {
    let l = s.len_signal();
    if x.len() != l {
        return Err(Error::LengthMismatch {
            expected: l,
            found: x.len(),
        });
    }
    let m = s.order();
    // table[k][i] = sigma^k h_k(x_i / sigma)
    let table: Vec<Vec<f64>> = (0..=m)
        .map(|k| x.iter().map(|&xi| sigma.powi(k as i32) * hermite_eval(k, xi / sigma)).collect())
        .collect();
    let e = s.entries();
    let total = match m {
        1 => (0..l).map(|i| e[i] * table[1][i]).sum(),
        2 => {
            let mut t = 0.0;
            for i in 0..l {
                for j in 0..l {
                    let h = if i == j { table[2][i] } else { table[1][i] * table[1][j] };
                    t += e[i * l + j] * h;
                }
            }
            t
        }
        3 => {
            let mut t = 0.0;
            for i in 0..l {
                for j in 0..l {
                    for k in 0..l {
                        let h = match (i == j, j == k, i == k) {
                            (true, true, _) => table[3][i],
                            (true, false, _) => table[2][i] * table[1][k],
                            (false, true, _) => table[1][i] * table[2][j],
                            (false, false, true) => table[2][i] * table[1][j],
                            (false, false, false) => table[1][i] * table[1][j] * table[1][k],
                        };
                        t += e[(i * l + j) * l + k] * h;
                    }
                }
            }
            t
        }
        _ => return Err(Error::InvalidInput(format!("tensor order {m} is not supported"))),
    };
    Ok(total)
}
