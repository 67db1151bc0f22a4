//! The observation model `X = R^(l) theta + sigma xi`: sampling, mixture
//! density, shift posteriors, empirical negative log-likelihood and Monte Carlo
//! KL divergence.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, CHUNK};
use crate::signal::Signal;

/// Noise standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    sigma: f64,
}

impl NoiseSpec {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidInput(format!("sigma must be positive, got {sigma}")));
        }
        Ok(Self { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// `n` observations of length `L`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    len: usize,
    sigma: f64,
    seed: u64,
    data: Vec<f64>,
    true_shifts: Option<Vec<usize>>,
}

impl SampleSet {
    pub fn from_rows(len: usize, sigma: f64, seed: u64, data: Vec<f64>) -> Result<Self> {
        NoiseSpec::new(sigma)?;
        if len == 0 || data.is_empty() || data.len() % len != 0 {
            return Err(Error::InvalidInput(format!(
                "{} values do not form rows of length {len}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("observations must be finite".into()));
        }
        Ok(Self {
            len,
            sigma,
            seed,
            data,
            true_shifts: None,
        })
    }

    pub fn len_signal(&self) -> usize {
        self.len
    }

    pub fn n(&self) -> usize {
        self.data.len() / self.len
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.len..(i + 1) * self.len]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.len)
    }

    pub fn true_shifts(&self) -> Option<&[usize]> {
        self.true_shifts.as_deref()
    }

    /// Every observation replaced by `R^(g) x`.
    pub fn shifted(&self, g: i64) -> SampleSet {
        let l = self.len;
        let g = g.rem_euclid(l as i64) as usize;
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.rows() {
            data.extend((0..l).map(|i| row[(i + g) % l]));
        }
        SampleSet {
            len: l,
            sigma: self.sigma,
            seed: self.seed,
            data,
            true_shifts: self
                .true_shifts
                .as_ref()
                .map(|s| s.iter().map(|&t| (t + g) % l).collect()),
        }
    }

    /// First `n` observations.
    pub fn truncated(&self, n: usize) -> SampleSet {
        let n = n.clamp(1, self.n());
        SampleSet {
            len: self.len,
            sigma: self.sigma,
            seed: self.seed,
            data: self.data[..n * self.len].to_vec(),
            true_shifts: self.true_shifts.as_ref().map(|s| s[..n].to_vec()),
        }
    }

    /// CSV with header `sigma,seed,n,L`, one metadata row, then one observation
    /// per row.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.data.len() * 24 + 64);
        out.push_str("sigma,seed,n,L\n");
        let _ = writeln!(out, "{:.16e},{},{},{}", self.sigma, self.seed, self.n(), self.len);
        for row in self.rows() {
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{v:.16e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv<R: Read>(reader: R) -> Result<SampleSet> {
        let mut lines = BufReader::new(reader).lines();
        let mut next = || -> Result<Option<String>> {
            for line in lines.by_ref() {
                let line = line.map_err(|e| Error::Parse(e.to_string()))?;
                if !line.trim().is_empty() {
                    return Ok(Some(line));
                }
            }
            Ok(None)
        };
        let header = next()?.ok_or_else(|| Error::Parse("empty sample file".into()))?;
        if header.trim() != "sigma,seed,n,L" {
            return Err(Error::Parse(format!("unexpected header `{header}`")));
        }
        let meta = next()?.ok_or_else(|| Error::Parse("missing metadata row".into()))?;
        let fields: Vec<&str> = meta.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Parse(format!("bad metadata row `{meta}`")));
        }
        let bad = |what: &str| Error::Parse(format!("bad {what} in metadata row"));
        let sigma: f64 = fields[0].parse().map_err(|_| bad("sigma"))?;
        let seed: u64 = fields[1].parse().map_err(|_| bad("seed"))?;
        let n: usize = fields[2].parse().map_err(|_| bad("n"))?;
        let len: usize = fields[3].parse().map_err(|_| bad("L"))?;
        let mut data = Vec::with_capacity(n * len);
        while let Some(line) = next()? {
            let before = data.len();
            for t in line.split(',') {
                data.push(
                    t.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Parse(format!("bad value `{t}`: {e}")))?,
                );
            }
            if data.len() - before != len {
                return Err(Error::LengthMismatch {
                    expected: len,
                    found: data.len() - before,
                });
            }
        }
        if data.len() != n * len {
            return Err(Error::Parse(format!(
                "metadata says n = {n} but found {} rows",
                data.len() / len.max(1)
            )));
        }
        SampleSet::from_rows(len, sigma, seed, data)
    }
}

/// Draws `n` observations. Chunk `c` of `CHUNK` observations uses its own
/// stream derived from `(seed, c)`, so output does not depend on thread count.
pub fn sample_observations(theta: &Signal, noise: NoiseSpec, n: usize, seed: u64) -> Result<SampleSet> {
    if n == 0 {
        return Err(Error::InvalidInput("n must be at least 1".into()));
    }
    let l = theta.len();
    let sigma = noise.sigma();
    let t = theta.values();
    let mut data = vec![0.0; n * l];
    let mut shifts = vec![0usize; n];
    data.par_chunks_mut(CHUNK * l)
        .zip(shifts.par_chunks_mut(CHUNK))
        .enumerate()
        .for_each(|(c, (block, sh))| {
            let mut rng = rng::stream(seed, &[0x0b5e_u64, c as u64]);
            for (row, s) in block.chunks_exact_mut(l).zip(sh.iter_mut()) {
                let ell = rng.random_range(0..l);
                *s = ell;
                for (i, v) in row.iter_mut().enumerate() {
                    let z: f64 = rng.sample(StandardNormal);
                    let idx = if i + ell >= l { i + ell - l } else { i + ell };
                    *v = t[idx] + sigma * z;
                }
            }
        });
    Ok(SampleSet {
        len: l,
        sigma,
        seed,
        data,
        true_shifts: Some(shifts),
    })
}

/// Precomputed view of a signal for evaluating `<x, R^(l) phi>` over all `l`
/// in `O(|support| L)`.
#[derive(Debug, Clone)]
pub struct ShiftKernel {
    len: usize,
    support: Vec<usize>,
    weights: Vec<f64>,
    norm_sq: f64,
}

impl ShiftKernel {
    pub fn new(phi: &Signal) -> Self {
        let support = phi.support();
        let weights = support.iter().map(|&j| phi.values()[j]).collect();
        Self {
            len: phi.len(),
            support,
            weights,
            norm_sq: phi.norm_sq(),
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.norm_sq
    }

    /// `out[l] = sum_j phi(j) x(j - l)`.
    pub fn correlate(&self, x: &[f64], out: &mut [f64]) {
        let l = self.len;
        out.iter_mut().for_each(|v| *v = 0.0);
        for (&j, &w) in self.support.iter().zip(&self.weights) {
            // ell <= j: index j - ell; ell > j: index j + L - ell
            for ell in 0..=j {
                out[ell] += w * x[j - ell];
            }
            for ell in j + 1..l {
                out[ell] += w * x[j + l - ell];
            }
        }
    }
}

/// `log mean exp` of a slice, stabilized.
pub fn log_mean_exp(v: &[f64]) -> f64 {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    let s: f64 = v.iter().map(|a| (a - mx).exp()).sum();
    mx + (s / v.len() as f64).ln()
}

fn check_obs(theta: &Signal, x: &[f64]) -> Result<()> {
    if x.len() != theta.len() {
        return Err(Error::LengthMismatch {
            expected: theta.len(),
            found: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("observation must be finite".into()));
    }
    Ok(())
}

pub(crate) fn log_density_with(kernel: &ShiftKernel, x: &[f64], sigma: f64, scratch: &mut [f64]) -> f64 {
    let l = x.len() as f64;
    let s2 = sigma * sigma;
    let xx: f64 = x.iter().map(|v| v * v).sum();
    kernel.correlate(x, scratch);
    scratch.iter_mut().for_each(|c| *c /= s2);
    -0.5 * l * (2.0 * PI * s2).ln() - (xx + kernel.norm_sq) / (2.0 * s2) + log_mean_exp(scratch)
}

/// `log f_theta(x)`.
pub fn log_density(theta: &Signal, x: &[f64], sigma: f64) -> Result<f64> {
    check_obs(theta, x)?;
    NoiseSpec::new(sigma)?;
    let kernel = ShiftKernel::new(theta);
    let mut scratch = vec![0.0; x.len()];
    Ok(log_density_with(&kernel, x, sigma, &mut scratch))
}

/// Posterior over shifts, `p[l] ∝ exp(<x, R^(l) theta> / sigma^2)`.
pub fn shift_posterior(theta: &Signal, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
    check_obs(theta, x)?;
    NoiseSpec::new(sigma)?;
    let kernel = ShiftKernel::new(theta);
    let mut p = vec![0.0; x.len()];
    kernel.correlate(x, &mut p);
    softmax_scaled(&mut p, 1.0 / (sigma * sigma));
    Ok(p)
}

/// In-place `softmax(scale * v)`.
pub(crate) fn softmax_scaled(v: &mut [f64], scale: f64) {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for a in v.iter_mut() {
        *a = ((*a - mx) * scale).exp();
        total += *a;
    }
    for a in v.iter_mut() {
        *a /= total;
    }
}

/// Mean of `-log f_phi(X_i)` over the sample.
pub fn empirical_nll(phi: &Signal, samples: &SampleSet) -> Result<f64> {
    if phi.len() != samples.len_signal() {
        return Err(Error::LengthMismatch {
            expected: samples.len_signal(),
            found: phi.len(),
        });
    }
    let kernel = ShiftKernel::new(phi);
    let l = phi.len();
    let sigma = samples.sigma();
    let partial: Vec<f64> = samples
        .data()
        .par_chunks(CHUNK * l)
        .map(|block| {
            let mut scratch = vec![0.0; l];
            block
                .chunks_exact(l)
                .map(|x| log_density_with(&kernel, x, sigma, &mut scratch))
                .sum::<f64>()
        })
        .collect();
    Ok(-partial.iter().sum::<f64>() / samples.n() as f64)
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
}

/// Batches used for the standard error of Monte Carlo averages.
pub const MC_BATCHES: usize = 20;

/// Plug-in estimate of `KL(P_theta || P_phi)` from `n_mc` draws of `P_theta`,
/// with a 20-batch-means standard error.
pub fn kl_monte_carlo(theta: &Signal, phi: &Signal, sigma: f64, n_mc: usize, seed: u64) -> Result<McEstimate> {
    if n_mc < 100 {
        return Err(Error::InvalidInput(format!("n_mc must be at least 100, got {n_mc}")));
    }
    if theta.len() != phi.len() {
        return Err(Error::LengthMismatch {
            expected: theta.len(),
            found: phi.len(),
        });
    }
    let noise = NoiseSpec::new(sigma)?;
    let l = theta.len();
    let kt = ShiftKernel::new(theta);
    let kp = ShiftKernel::new(phi);
    let samples = sample_observations(theta, noise, n_mc, seed)?;
    let mut diffs = vec![0.0; n_mc];
    diffs
        .par_chunks_mut(CHUNK)
        .zip(samples.data().par_chunks(CHUNK * l))
        .for_each(|(out, block)| {
            let mut s = vec![0.0; l];
            for (o, x) in out.iter_mut().zip(block.chunks_exact(l)) {
                *o = log_density_with(&kt, x, sigma, &mut s) - log_density_with(&kp, x, sigma, &mut s);
            }
        });
    Ok(batch_means(&diffs))
}

/// Mean and batch-means standard error over `MC_BATCHES` contiguous batches.
pub fn batch_means(values: &[f64]) -> McEstimate {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let b = MC_BATCHES.min(n);
    let mut means = Vec::with_capacity(b);
    for k in 0..b {
        let (lo, hi) = (k * n / b, (k + 1) * n / b);
        means.push(values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64);
    }
    let var = if b > 1 {
        means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / (b - 1) as f64
    } else {
        0.0
    };
    McEstimate {
        estimate: mean,
        std_error: (var / b as f64).sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{rho_distance, sample_class_signal, SignalClassSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn brute_log_density(theta: &Signal, x: &[f64], sigma: f64) -> f64 {
        let l = theta.len();
        let terms: Vec<f64> = (0..l)
            .map(|k| {
                let g = theta.shifted(k as i64);
                let d: f64 = x.iter().zip(g.values()).map(|(a, b)| (a - b) * (a - b)).sum();
                -d / (2.0 * sigma * sigma)
            })
            .collect();
        -0.5 * l as f64 * (2.0 * PI * sigma * sigma).ln() + log_mean_exp(&terms)
    }

    fn gaussian_log_density(x: &[f64], sigma: f64) -> f64 {
        let xx: f64 = x.iter().map(|v| v * v).sum();
        -0.5 * x.len() as f64 * (2.0 * PI * sigma * sigma).ln() - xx / (2.0 * sigma * sigma)
    }

    fn default_theta(seed: u64) -> Signal {
        sample_class_signal(&SignalClassSpec::default(), seed).unwrap()
    }

    #[test]
    fn near_noiseless_samples_are_shifts() {
        let theta = default_theta(1);
        let s = sample_observations(&theta, NoiseSpec::new(1e-12).unwrap(), 200, 5).unwrap();
        for (row, &ell) in s.rows().zip(s.true_shifts().unwrap()) {
            let obs = Signal::new(row.to_vec()).unwrap();
            assert!(obs.sub(&theta.shifted(ell as i64)).unwrap().norm() < 1e-9);
            assert!(rho_distance(&obs, &theta).unwrap().value < 1e-9);
        }
    }

    #[test]
    fn sample_mean_tracks_signal_mean() {
        let theta = default_theta(2);
        let sigma = 2.0 * theta.norm();
        let l = theta.len();
        let n = 4000;
        let mut within = 0;
        for trial in 0..40 {
            let s = sample_observations(&theta, NoiseSpec::new(sigma).unwrap(), n, 100 + trial).unwrap();
            let mut mean = vec![0.0; l];
            for row in s.rows() {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v / n as f64;
                }
            }
            let err: f64 = mean.iter().map(|m| (m - theta.mean()).powi(2)).sum::<f64>().sqrt();
            if err <= 4.0 * sigma * (l as f64 / n as f64).sqrt() {
                within += 1;
            }
        }
        assert!(within >= 38, "{within}/40");
    }

    #[test]
    fn second_moment_includes_noise_identity() {
        let theta = Signal::new(vec![1.0, -0.5, 0.0, 0.25, 0.0]).unwrap();
        let sigma = 0.7;
        let n = 200_000;
        let s = sample_observations(&theta, NoiseSpec::new(sigma).unwrap(), n, 9).unwrap();
        let l = 5;
        for i in 0..l {
            for j in 0..l {
                let emp: f64 = s.rows().map(|x| x[i] * x[j]).sum::<f64>() / n as f64;
                let pop: f64 = (0..l).map(|g| theta.values()[(i + g) % l] * theta.values()[(j + g) % l]).sum::<f64>()
                    / l as f64
                    + if i == j { sigma * sigma } else { 0.0 };
                assert!((emp - pop).abs() < 6.0 * sigma * sigma / (n as f64).sqrt() * 2.0, "({i},{j}) {emp} {pop}");
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_across_threads() {
        let theta = default_theta(3);
        let noise = NoiseSpec::new(1.5).unwrap();
        let a = sample_observations(&theta, noise, 3000, 77).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| sample_observations(&theta, noise, 3000, 77).unwrap());
        assert_eq!(a, b);
        assert_ne!(a, sample_observations(&theta, noise, 3000, 78).unwrap());
        assert!(sample_observations(&theta, noise, 0, 1).is_err());
    }

    #[test]
    fn zero_signal_density_is_gaussian() {
        let x = [0.3, -1.2, 2.0, 0.1];
        let z = Signal::zeros(4);
        let a = log_density(&z, &x, 1.3).unwrap();
        assert!((a - gaussian_log_density(&x, 1.3)).abs() < 1e-12);
        let p = shift_posterior(&z, &x, 1.3).unwrap();
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let s = SampleSet::from_rows(4, 1.3, 0, x.to_vec()).unwrap();
        assert!((empirical_nll(&z, &s).unwrap() + a).abs() < 1e-12);
        assert!(log_density(&z, &[0.0, f64::NAN, 0.0, 0.0], 1.0).is_err());
        assert!(log_density(&z, &[0.0; 3], 1.0).is_err());
    }

    #[test]
    fn density_is_stable_at_tiny_sigma() {
        let theta = default_theta(4);
        let x = theta.shifted(5).into_values();
        let v = log_density(&theta, &x, 1e-3).unwrap();
        assert!(v.is_finite());
        let p = shift_posterior(&theta, &x, 1e-3).unwrap();
        assert!((p[5] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn density_integrates_to_one() {
        // importance sampling under N(0, (2 sigma)^2 I)
        let theta = Signal::new(vec![1.0, 0.0, -0.5, 0.0, 0.0, 0.8]).unwrap();
        let sigma = 0.9;
        let q = 1.5 * sigma;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let n = 200_000;
        let w: Vec<f64> = (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..6).map(|_| q * rng.sample::<f64, _>(StandardNormal)).collect();
                (log_density(&theta, &x, sigma).unwrap() - gaussian_log_density(&x, q)).exp()
            })
            .collect();
        let est = batch_means(&w);
        assert!((est.estimate - 1.0).abs() < 3.0 * est.std_error + 1e-3, "{est:?}");
    }

    #[test]
    fn nll_prefers_truth() {
        let spec = SignalClassSpec::default();
        let mut wins = 0;
        let trials = 20;
        for t in 0..trials {
            let theta = sample_class_signal(&spec, 1000 + t).unwrap();
            let mut phi = sample_class_signal(&spec, 2000 + t).unwrap();
            let mut k = 0;
            while rho_distance(&theta, &phi).unwrap().value < 0.5 {
                k += 1;
                phi = sample_class_signal(&spec, 3000 + 100 * t + k).unwrap();
            }
            let s = sample_observations(&theta, NoiseSpec::new(1.0).unwrap(), 5000, t).unwrap();
            if empirical_nll(&theta, &s).unwrap() < empirical_nll(&phi, &s).unwrap() {
                wins += 1;
            }
        }
        assert!(wins as f64 >= 0.95 * trials as f64);
    }

    #[test]
    fn kl_vanishes_on_the_orbit() {
        let theta = default_theta(5);
        let sigma = 2.0 * theta.norm();
        for phi in [theta.clone(), theta.shifted(7)] {
            let k = kl_monte_carlo(&theta, &phi, sigma, 2000, 3).unwrap();
            assert!(k.estimate.abs() <= 3.0 * k.std_error + 1e-12, "{k:?}");
        }
        assert!(kl_monte_carlo(&theta, &theta, sigma, 99, 3).is_err());
    }

    #[test]
    fn kl_is_nonnegative_on_random_pairs() {
        let spec = SignalClassSpec::default();
        for t in 0..50 {
            let theta = sample_class_signal(&spec, 500 + t).unwrap();
            let phi = sample_class_signal(&spec, 900 + t).unwrap();
            let k = kl_monte_carlo(&theta, &phi, 1.5 * theta.norm(), 2000, t).unwrap();
            assert!(k.estimate >= -3.0 * k.std_error, "{k:?}");
        }
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let theta = default_theta(6);
        let s = sample_observations(&theta, NoiseSpec::new(0.3).unwrap(), 17, 2).unwrap();
        let text = s.to_csv();
        assert!(text.starts_with("sigma,seed,n,L\n"));
        let back = SampleSet::from_csv(text.as_bytes()).unwrap();
        assert_eq!(back.data(), s.data());
        assert_eq!((back.sigma(), back.seed(), back.n()), (s.sigma(), s.seed(), 17));
        assert!(SampleSet::from_csv("sigma,seed,n,L\n1,2,2,3\n1,2,3\n".as_bytes()).is_err());
        assert!(SampleSet::from_csv("a,b\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn kernel_matches_brute_force(
            vals in prop::collection::vec(prop_oneof![Just(0.0), -2.0f64..2.0], 9),
            x in prop::collection::vec(-3.0f64..3.0, 9),
            sigma in 0.2f64..3.0,
        ) {
            let theta = Signal::new(vals).unwrap();
            let a = log_density(&theta, &x, sigma).unwrap();
            prop_assert!((a - brute_log_density(&theta, &x, sigma)).abs() < 1e-10 * (1.0 + a.abs()));
            // posterior against direct normalization
            let p = shift_posterior(&theta, &x, sigma).unwrap();
            let mut direct: Vec<f64> = (0..9).map(|k| {
                let g = theta.shifted(k);
                -x.iter().zip(g.values()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (2.0 * sigma * sigma)
            }).collect();
            let mx = direct.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            direct.iter_mut().for_each(|v| *v = (*v - mx).exp());
            let tot: f64 = direct.iter().sum();
            for (a, b) in p.iter().zip(&direct) {
                prop_assert!((a - b / tot).abs() < 1e-10);
            }
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn orbit_invariance(
            vals in prop::collection::vec(-2.0f64..2.0, 7),
            x in prop::collection::vec(-3.0f64..3.0, 7),
            k in 0i64..7,
        ) {
            let theta = Signal::new(vals).unwrap();
            let rx = Signal::new(x.clone()).unwrap().shifted(k).into_values();
            let a = log_density(&theta, &x, 1.1).unwrap();
            let b = log_density(&theta.shifted(k), &rx, 1.1).unwrap();
            prop_assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
            let s = SampleSet::from_rows(7, 1.1, 0, x).unwrap();
            let n1 = empirical_nll(&theta, &s).unwrap();
            let n2 = empirical_nll(&theta.shifted(k), &s).unwrap();
            prop_assert!((n1 - n2).abs() < 1e-12 * (1.0 + n1.abs()));
        }
    }
}
