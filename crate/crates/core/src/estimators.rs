//! Signal estimators: method of moments from the debiased third moment, EM
//! refinement on a fixed support, the multi-start restricted MLE and an
//! exhaustive grid oracle for tiny instances.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beltway::{recover_support, supports_equivalent};
use crate::error::{Error, Result};
use crate::model::{empirical_nll, log_mean_exp, SampleSet, ShiftKernel};
use crate::moments::{circulant_third_entry, SampleThirdMoment, ThirdMomentSource};
use crate::rng::{self, CHUNK};
use crate::signal::{
    project_to_class, project_to_class_greedy, rho_distance, sample_class_signal, sample_collision_free_support,
    support_is_collision_free, DifferenceMultiset,
    Signal, SignalClassSpec,
};

/// Run diagnostics attached to every estimate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub method: String,
    pub iterations: usize,
    pub final_nll: Option<f64>,
    pub support_recovered: Option<bool>,
    pub restarts: usize,
    pub orientation_tie: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    #[serde(serialize_with = "ser_signal", deserialize_with = "de_signal")]
    pub estimate: Signal,
    pub error_rho: Option<f64>,
    pub diagnostics: Diagnostics,
}

fn ser_signal<S: serde::Serializer>(s: &Signal, ser: S) -> std::result::Result<S::Ok, S::Error> {
    s.values().serialize(ser)
}

fn de_signal<'de, D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Signal, D::Error> {
    let v = Vec::<f64>::deserialize(de)?;
    Signal::new(v).map_err(serde::de::Error::custom)
}

impl EstimateReport {
    fn new(estimate: Signal, diagnostics: Diagnostics) -> Self {
        Self {
            estimate,
            error_rho: None,
            diagnostics,
        }
    }

    /// Fills `error_rho` and `support_recovered` against a known truth.
    pub fn with_truth(mut self, truth: &Signal) -> Result<Self> {
        self.error_rho = Some(evaluate_error(&self.estimate, truth)?);
        let r = rho_distance(truth, &self.estimate)?;
        let aligned = self.estimate.shifted(r.shift as i64);
        self.diagnostics.support_recovered = Some(aligned.support() == truth.support());
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// `rho(estimate, truth)`.
pub fn evaluate_error(estimate: &Signal, truth: &Signal) -> Result<f64> {
    Ok(rho_distance(estimate, truth)?.value)
}

/// Orbit distance allowing an extra reflection of the estimate.
pub fn evaluate_error_mod_reflection(estimate: &Signal, truth: &Signal) -> Result<f64> {
    let a = rho_distance(estimate, truth)?.value;
    let b = rho_distance(&estimate.reflected(), truth)?.value;
    Ok(a.min(b))
}

// ---------------------------------------------------------------- moments ---

/// Tuning of the moment estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomConfig {
    /// Multiplier `c` of the noise term in the detection threshold.
    pub tau_c: f64,
}

impl Default for MomConfig {
    fn default() -> Self {
        Self { tau_c: 3.0 }
    }
}

/// `tau = max(m^3 / (4L), c sigma^3 sqrt(ln L / n))`; without samples only the
/// first term applies.
pub fn detection_threshold(spec: &SignalClassSpec, sigma: f64, n: Option<usize>, tau_c: f64) -> f64 {
    let floor = spec.m_lo.powi(3) / (4.0 * spec.len as f64);
    match n {
        Some(n) => floor.max(tau_c * sigma.powi(3) * ((spec.len as f64).ln() / n as f64).sqrt()),
        None => floor,
    }
}

/// Value at a support point from its two third-order entries,
/// `cbrt(L * T_iij^2 / T_ijj)`.
pub fn cube_root_value(t_iij: f64, t_ijj: f64, len: usize) -> f64 {
    (len as f64 * t_iij * t_iij / t_ijj).cbrt()
}

/// Intermediate results of a moment inversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomInfo {
    pub threshold: f64,
    pub detected: usize,
    pub candidates: usize,
    pub orientation_tie: bool,
    pub score_gap: f64,
}

fn inversion(stage: &'static str, reason: impl Into<String>) -> Error {
    Error::MomentInversion {
        stage,
        reason: reason.into(),
    }
}

/// Inverts circulant third-order data into a class member.
///
/// Steps: threshold `T[0,d,d]` to find the difference set, solve the beltway
/// instance, extract each value by the cube-root formula (median over
/// partners), score every candidate support and its reflection by the
/// least-squares misfit against the data, and project the best onto the class.
pub fn mom_from_moments<S: ThirdMomentSource + ?Sized>(
    src: &S,
    spec: &SignalClassSpec,
    tau: f64,
) -> Result<(Signal, MomInfo)> {
    let l = src.len_signal();
    if l != spec.len {
        return Err(Error::LengthMismatch {
            expected: spec.len,
            found: l,
        });
    }
    let s = spec.sparsity;
    let mut pairs: Vec<(usize, usize)> = (1..l).map(|d| (d, d)).collect();
    pairs.extend((1..l).map(|d| (0, d)));
    let vals = src.circulant_entries(&pairs);
    let mut c_dd = vec![0.0; l];
    let mut c_0d = vec![0.0; l];
    for d in 1..l {
        c_dd[d] = vals[d - 1];
        c_0d[d] = vals[l - 1 + d - 1];
    }

    let mut counts = BTreeMap::new();
    for d in 1..l {
        if 0.5 * (c_dd[d].abs() + c_dd[l - d].abs()) > tau {
            counts.insert(d, 1);
        }
    }
    let detected = counts.len();
    if detected != s * (s - 1) {
        return Err(inversion(
            "support-detection",
            format!("{detected} differences above threshold {tau:.3e}, expected {}", s * (s - 1)),
        ));
    }
    let dms = DifferenceMultiset::from_counts(l, counts)?;
    let sol = recover_support(&dms, l, s).map_err(|e| inversion("beltway", e.to_string()))?;

    let mut oriented: Vec<Vec<usize>> = Vec::new();
    for c in &sol.candidates {
        let mut r: Vec<usize> = c.iter().map(|&x| (l - x) % l).collect();
        r.sort_unstable();
        oriented.push(c.clone());
        oriented.push(r);
    }
    let mut signals = Vec::with_capacity(oriented.len());
    for supp in &oriented {
        let mut values = Vec::with_capacity(s);
        for &a in supp {
            let mut est: Vec<f64> = supp
                .iter()
                .filter(|&&b| b != a)
                .filter_map(|&b| {
                    let d = (b + l - a) % l;
                    let v = cube_root_value(c_0d[d], c_dd[d], l);
                    (c_dd[d] != 0.0 && v.is_finite()).then_some(v)
                })
                .collect();
            if est.is_empty() {
                return Err(inversion("cube-root", format!("no usable partner for index {a}")));
            }
            est.sort_by(f64::total_cmp);
            let m = est.len();
            let med = if m % 2 == 1 {
                est[m / 2]
            } else {
                0.5 * (est[m / 2 - 1] + est[m / 2])
            };
            values.push(med);
        }
        signals.push(Signal::from_support(l, supp, &values)?);
    }

    // one batched query for every circulant class any candidate touches
    let mut class_sets: Vec<Vec<(usize, usize)>> = Vec::with_capacity(oriented.len());
    let mut all: BTreeSet<(usize, usize)> = BTreeSet::new();
    for supp in &oriented {
        let mut set = BTreeSet::new();
        for &a in supp {
            for &b in supp {
                for &c in supp {
                    set.insert(((b + l - a) % l, (c + l - a) % l));
                }
            }
        }
        all.extend(set.iter().copied());
        class_sets.push(set.into_iter().collect());
    }
    let all: Vec<(usize, usize)> = all.into_iter().collect();
    let data: BTreeMap<(usize, usize), f64> = all.iter().copied().zip(src.circulant_entries(&all)).collect();
    let scores: Vec<f64> = signals
        .iter()
        .zip(&class_sets)
        .map(|(sig, set)| {
            set.iter()
                .map(|&(d1, d2)| {
                    let c = circulant_third_entry(sig, d1, d2);
                    c * c - 2.0 * c * data[&(d1, d2)]
                })
                .sum::<f64>()
        })
        .collect();

    let mut order: Vec<usize> = (0..signals.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(oriented[a].cmp(&oriented[b])));
    let best = order[0];
    let (gap, tie) = if order.len() > 1 {
        let (a, b) = (scores[order[0]], scores[order[1]]);
        let gap = b - a;
        (gap, gap <= 1e-9 * a.abs().max(b.abs()).max(f64::MIN_POSITIVE))
    } else {
        (f64::INFINITY, false)
    };
    let estimate = project_to_class(&signals[best], spec).map_err(|e| inversion("projection", e.to_string()))?;
    Ok((
        estimate,
        MomInfo {
            threshold: tau,
            detected,
            candidates: sol.candidates.len(),
            orientation_tie: tie,
            score_gap: gap,
        },
    ))
}

/// Method-of-moments estimate from samples with the default threshold policy.
pub fn mom_estimate(samples: &SampleSet, spec: &SignalClassSpec) -> Result<EstimateReport> {
    mom_estimate_with(samples, spec, &MomConfig::default())
}

pub fn mom_estimate_with(samples: &SampleSet, spec: &SignalClassSpec, cfg: &MomConfig) -> Result<EstimateReport> {
    let view = SampleThirdMoment::new(samples);
    let tau = detection_threshold(spec, samples.sigma(), Some(samples.n()), cfg.tau_c);
    let (estimate, info) = mom_from_moments(&view, spec, tau)?;
    let mut diag = Diagnostics {
        method: "mom".into(),
        orientation_tie: info.orientation_tie,
        ..Default::default()
    };
    if info.orientation_tie {
        diag.notes.push("orientations scored within 1e-9".into());
    }
    if info.candidates > 1 {
        diag.notes.push(format!("{} inequivalent supports share the differences", info.candidates));
    }
    diag.final_nll = Some(empirical_nll(&estimate, samples)?);
    Ok(EstimateReport::new(estimate, diag))
}

// --------------------------------------------------------------------- EM ---

/// Tuning of a single EM run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// Squared-extrapolation acceleration with a monotonicity safeguard.
    pub accelerate: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
            accelerate: true,
        }
    }
}

/// Output of an EM run. `nll_trace[k]` is the NLL of the `k`-th accepted
/// iterate; `clipped[k]` records whether reaching iterate `k + 1` clipped a
/// magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct EmRun {
    pub estimate: Signal,
    pub nll: f64,
    pub nll_trace: Vec<f64>,
    pub clipped: Vec<bool>,
    pub iterations: usize,
    pub passes: usize,
}

struct Pass {
    nll: f64,
    /// Unconstrained M-step on the support.
    update: Vec<f64>,
    /// Unconstrained M-step on every coordinate, when requested.
    full: Option<Vec<f64>>,
}

/// One sweep over the sample: NLL of `phi` and the posterior-weighted average
/// of back-shifted observations.
fn em_pass(samples: &SampleSet, phi: &Signal, support: &[usize], want_full: bool) -> Pass {
    let l = samples.len_signal();
    let sigma = samples.sigma();
    let s2 = sigma * sigma;
    let kernel = ShiftKernel::new(phi);
    let cst = -0.5 * l as f64 * (2.0 * std::f64::consts::PI * s2).ln();
    let k = support.len();
    let width = if want_full { l } else { k };
    let partials: Vec<(f64, Vec<f64>)> = samples
        .data()
        .par_chunks(CHUNK * l)
        .map(|block| {
            let mut acc = vec![0.0; width];
            let mut c = vec![0.0; l];
            let mut ll = 0.0;
            for x in block.chunks_exact(l) {
                let xx: f64 = x.iter().map(|v| v * v).sum();
                kernel.correlate(x, &mut c);
                c.iter_mut().for_each(|v| *v /= s2);
                let lme = log_mean_exp(&c);
                ll += cst - (xx + kernel.norm_sq()) / (2.0 * s2) + lme;
                let mx = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut tot = 0.0;
                for v in c.iter_mut() {
                    *v = (*v - mx).exp();
                    tot += *v;
                }
                let inv = 1.0 / tot;
                if want_full {
                    for (j, a) in acc.iter_mut().enumerate() {
                        *a += back_project(&c, x, j) * inv;
                    }
                } else {
                    for (&j, a) in support.iter().zip(acc.iter_mut()) {
                        *a += back_project(&c, x, j) * inv;
                    }
                }
            }
            (ll, acc)
        })
        .collect();
    let n = samples.n() as f64;
    let mut ll = 0.0;
    let mut acc = vec![0.0; width];
    for (p, a) in &partials {
        ll += p;
        for (t, v) in acc.iter_mut().zip(a) {
            *t += v;
        }
    }
    acc.iter_mut().for_each(|v| *v /= n);
    let (update, full) = if want_full {
        (support.iter().map(|&j| acc[j]).collect(), Some(acc))
    } else {
        (acc, None)
    };
    Pass {
        nll: -ll / n,
        update,
        full,
    }
}

/// `sum_l w[l] x(j - l)`.
#[inline]
fn back_project(w: &[f64], x: &[f64], j: usize) -> f64 {
    let l = x.len();
    let mut s = 0.0;
    for (p, xv) in w[..=j].iter().zip(x[..=j].iter().rev()) {
        s += p * xv;
    }
    for (p, xv) in w[j + 1..].iter().zip(x[j + 1..].iter().rev()) {
        s += p * xv;
    }
    debug_assert_eq!(l, w.len());
    s
}

fn clip_update(update: &[f64], spec: &SignalClassSpec) -> (Vec<f64>, bool) {
    let mut clipped = false;
    let v = update
        .iter()
        .map(|&u| {
            let c = spec.clip(u);
            if c != u {
                clipped = true;
            }
            c
        })
        .collect();
    (v, clipped)
}

fn check_init(init: &Signal, spec: &SignalClassSpec, samples: &SampleSet) -> Result<Vec<usize>> {
    if init.len() != samples.len_signal() || init.len() != spec.len {
        return Err(Error::LengthMismatch {
            expected: spec.len,
            found: init.len(),
        });
    }
    let support = init.support();
    if support.len() != spec.sparsity {
        return Err(Error::Precondition(format!(
            "initial support has {} points, need {}",
            support.len(),
            spec.sparsity
        )));
    }
    if let Some(d) = DifferenceMultiset::from_support(&support, spec.len).first_collision() {
        return Err(Error::NotCollisionFree { difference: d });
    }
    Ok(support)
}

fn divergence_slack(nll: f64) -> f64 {
    1e-9 * (1.0 + nll.abs())
}

/// EM on the support of `init`. The M-step average is clipped into the class
/// magnitudes, which is the exact constrained maximizer of the EM surrogate.
pub fn em_run(samples: &SampleSet, init: &Signal, spec: &SignalClassSpec, cfg: &EmConfig) -> Result<EmRun> {
    let support = check_init(init, spec, samples)?;
    let l = spec.len;
    let to_signal = |v: &[f64]| Signal::from_support(l, &support, v);
    let mut cur: Vec<f64> = support.iter().map(|&j| spec.clip(init.values()[j])).collect();
    let mut trace = Vec::new();
    let mut clipped_flags = Vec::new();
    let mut passes = 0;

    let mut pass = em_pass(samples, &to_signal(&cur)?, &support, false);
    passes += 1;
    trace.push(pass.nll);
    for iter in 0..cfg.max_iter {
        let (f1, c1) = clip_update(&pass.update, spec);
        let p1 = em_pass(samples, &to_signal(&f1)?, &support, false);
        passes += 1;
        if p1.nll > pass.nll + divergence_slack(pass.nll) && !c1 {
            return Err(Error::EmDiverged {
                iteration: iter + 1,
                previous: pass.nll,
                current: p1.nll,
            });
        }
        let (next, next_pass, clipped) = if cfg.accelerate {
            let (f2, c2) = clip_update(&p1.update, spec);
            let r: Vec<f64> = f1.iter().zip(&cur).map(|(a, b)| a - b).collect();
            let v: Vec<f64> = f2.iter().zip(&f1).zip(&r).map(|((a, b), r)| a - b - r).collect();
            let rn = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let mut chosen = None;
            if vn > 0.0 && rn > 0.0 {
                let alpha = (-rn / vn).min(-1.0);
                let ext: Vec<f64> = cur
                    .iter()
                    .zip(&r)
                    .zip(&v)
                    .map(|((c, r), v)| c - 2.0 * alpha * r + alpha * alpha * v)
                    .collect();
                let (ext, ce) = clip_update(&ext, spec);
                let pe = em_pass(samples, &to_signal(&ext)?, &support, false);
                passes += 1;
                if pe.nll <= p1.nll {
                    chosen = Some((ext, pe, ce || c1));
                }
            }
            match chosen {
                Some(c) => c,
                None => {
                    let p2 = em_pass(samples, &to_signal(&f2)?, &support, false);
                    passes += 1;
                    if p2.nll > p1.nll + divergence_slack(p1.nll) && !c2 {
                        return Err(Error::EmDiverged {
                            iteration: iter + 1,
                            previous: p1.nll,
                            current: p2.nll,
                        });
                    }
                    (f2, p2, c1 || c2)
                }
            }
        } else {
            (f1, p1, c1)
        };
        let improvement = pass.nll - next_pass.nll;
        clipped_flags.push(clipped);
        trace.push(next_pass.nll);
        cur = next;
        pass = next_pass;
        if improvement < cfg.tol {
            return Ok(EmRun {
                estimate: to_signal(&cur)?,
                nll: pass.nll,
                nll_trace: trace,
                clipped: clipped_flags,
                iterations: iter + 1,
                passes,
            });
        }
    }
    Ok(EmRun {
        estimate: to_signal(&cur)?,
        nll: pass.nll,
        nll_trace: trace,
        clipped: clipped_flags,
        iterations: cfg.max_iter,
        passes,
    })
}

/// EM whose M-step projects the full-length back-projected average onto the
/// class with [`project_to_class_greedy`], so the support can move. The
/// surrogate's exact maximizer over the class is the nearest class member to
/// that average; the greedy projection approximates it, so each step is kept
/// only while the NLL decreases.
pub fn free_support_em(samples: &SampleSet, init: &Signal, spec: &SignalClassSpec, max_iter: usize) -> Result<EmRun> {
    check_init(init, spec, samples)?;
    let mut cur = init.clone();
    let mut pass = em_pass(samples, &cur, &cur.support(), true);
    let mut trace = vec![pass.nll];
    let mut passes = 1;
    let mut iterations = 0;
    for _ in 0..max_iter {
        let full = Signal::new(pass.full.clone().expect("full update requested"))?;
        let next = match project_to_class_greedy(&full, spec) {
            Ok(p) => p,
            Err(_) => break,
        };
        let np = em_pass(samples, &next, &next.support(), true);
        passes += 1;
        if np.nll >= pass.nll {
            break;
        }
        iterations += 1;
        trace.push(np.nll);
        let same = next.support() == cur.support();
        cur = next;
        pass = np;
        if same && trace[trace.len() - 2] - pass.nll < 1e-6 {
            break;
        }
    }
    Ok(EmRun {
        estimate: cur,
        nll: pass.nll,
        clipped: vec![false; trace.len() - 1],
        nll_trace: trace,
        iterations,
        passes,
    })
}

/// EM refinement from `init`, stopping when the NLL improves by less than `tol`.
pub fn em_refine(
    samples: &SampleSet,
    init: &Signal,
    spec: &SignalClassSpec,
    tol: f64,
    max_iter: usize,
) -> Result<EstimateReport> {
    let run = em_run(
        samples,
        init,
        spec,
        &EmConfig {
            tol,
            max_iter,
            accelerate: false,
        },
    )?;
    Ok(EstimateReport::new(
        run.estimate,
        Diagnostics {
            method: "em".into(),
            iterations: run.iterations,
            final_nll: Some(run.nll),
            restarts: 1,
            ..Default::default()
        },
    ))
}

// -------------------------------------------------------- restricted MLE ---

/// Circulant second moment `c(d) = (1/(nL)) sum_i sum_g x_i(g) x_i(g+d) - sigma^2 [d = 0]`.
pub fn empirical_autocorrelation(samples: &SampleSet) -> Vec<f64> {
    let l = samples.len_signal();
    let partials: Vec<Vec<f64>> = samples
        .data()
        .par_chunks(CHUNK * l)
        .map(|block| {
            let mut acc = vec![0.0; l];
            for x in block.chunks_exact(l) {
                for (d, a) in acc.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for g in 0..l - d {
                        s += x[g] * x[g + d];
                    }
                    for g in l - d..l {
                        s += x[g] * x[g + d - l];
                    }
                    *a += s;
                }
            }
            acc
        })
        .collect();
    let mut c = vec![0.0; l];
    for p in &partials {
        for (t, v) in c.iter_mut().zip(p) {
            *t += v;
        }
    }
    let scale = 1.0 / (samples.n() as f64 * l as f64);
    c.iter_mut().for_each(|v| *v *= scale);
    c[0] -= samples.sigma() * samples.sigma();
    c
}

/// Fit of a support to the autocorrelation: the best over sign patterns of
/// `sum_{a<b} s_a s_b c(b - a)`, with the first sign fixed to +1. Returns the
/// score and the maximizing signs.
fn sign_fit(supp: &[usize], c: &[f64], l: usize) -> (f64, u32) {
    let s = supp.len();
    let mut pair = vec![0.0; s * s];
    for i in 0..s {
        for j in i + 1..s {
            pair[i * s + j] = c[(supp[j] + l - supp[i]) % l];
        }
    }
    let mut best = (f64::NEG_INFINITY, 0u32);
    for mask in 0..1u32 << (s - 1) {
        let sign = |i: usize| if i > 0 && mask >> (i - 1) & 1 == 1 { -1.0 } else { 1.0 };
        let mut total = 0.0;
        for i in 0..s {
            for j in i + 1..s {
                total += sign(i) * sign(j) * pair[i * s + j];
            }
        }
        if total > best.0 {
            best = (total, mask);
        }
    }
    best
}

/// Hill climbing over collision-free supports for [`sign_fit`]: each sweep
/// moves one point to the position that raises the score most. Starts from
/// `tries` random collision-free supports and returns the `count` best
/// distinct local optima (distinct up to shift and reflection) as signals
/// with mid-range magnitudes and the fitted signs.
pub fn second_moment_starts(samples: &SampleSet, spec: &SignalClassSpec, tries: usize, count: usize, seed: u64) -> Result<Vec<Signal>> {
    let l = spec.len;
    if samples.len_signal() != l {
        return Err(Error::LengthMismatch {
            expected: l,
            found: samples.len_signal(),
        });
    }
    let c = empirical_autocorrelation(samples);
    let mut optima: Vec<(f64, Vec<usize>, u32)> = Vec::new();
    for t in 0..tries {
        let mut supp = sample_collision_free_support(spec, rng::derive_seed(seed, &[0x32, t as u64]))?;
        supp.sort_unstable();
        let mut score = sign_fit(&supp, &c, l).0;
        loop {
            let mut step: Option<(f64, usize, usize)> = None;
            for k in 0..supp.len() {
                for x in 0..l {
                    if supp.contains(&x) {
                        continue;
                    }
                    let mut cand = supp.clone();
                    cand[k] = x;
                    if !support_is_collision_free(&cand, l) {
                        continue;
                    }
                    let sc = sign_fit(&cand, &c, l).0;
                    if sc > score + 1e-15 && step.is_none_or(|(b, _, _)| sc > b) {
                        step = Some((sc, k, x));
                    }
                }
            }
            match step {
                Some((sc, k, x)) => {
                    supp[k] = x;
                    score = sc;
                }
                None => break,
            }
        }
        supp.sort_unstable();
        if optima.iter().any(|(_, o, _)| supports_equivalent(o, &supp, l)) {
            continue;
        }
        let mask = sign_fit(&supp, &c, l).1;
        optima.push((score, supp, mask));
    }
    optima.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    let mid = 0.5 * (spec.m_lo + spec.m_hi);
    optima
        .into_iter()
        .take(count)
        .map(|(_, supp, mask)| {
            let vals: Vec<f64> = (0..supp.len())
                .map(|i| if i > 0 && mask >> (i - 1) & 1 == 1 { -mid } else { mid })
                .collect();
            Signal::from_support(l, &supp, &vals)
        })
        .collect()
}

/// Settings of the multi-start restricted MLE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MleConfig {
    /// One moment-based start plus `restarts - 1` random class starts.
    pub restarts: usize,
    pub em: EmConfig,
    pub seed: u64,
    pub tau_c: f64,
    /// Number of [`second_moment_starts`] optima used as starts, each with its
    /// reflection and negation.
    pub second_moment_candidates: usize,
    /// Hill-climbing restarts behind the second-moment starts.
    pub second_moment_tries: usize,
    /// Iteration cap for the free-support stage of each start; 0 disables it.
    pub free_support_iters: usize,
    /// Starts are screened on the first `screen_n` observations when there
    /// are more; 0 screens on everything.
    pub screen_n: usize,
    /// Screened starts carried to the full sample.
    pub polish: usize,
}

impl Default for MleConfig {
    fn default() -> Self {
        Self {
            restarts: 4,
            em: EmConfig::default(),
            seed: 0,
            tau_c: 3.0,
            second_moment_candidates: 4,
            second_moment_tries: 128,
            free_support_iters: 50,
            screen_n: 8192,
            polish: 2,
        }
    }
}

/// Result of the multi-start search. `run_nlls[i]` is the full-sample NLL
/// reached from start `i`, `None` when it failed or was screened out.
#[derive(Debug, Clone)]
pub struct MleOutcome {
    pub report: EstimateReport,
    pub run_nlls: Vec<Option<f64>>,
    pub screen_nlls: Vec<Option<f64>>,
    pub start_labels: Vec<String>,
}

/// Restricted MLE with `restarts` starts and default settings otherwise.
pub fn restricted_mle(samples: &SampleSet, spec: &SignalClassSpec, restarts: usize) -> Result<EstimateReport> {
    let cfg = MleConfig {
        restarts,
        ..MleConfig::default()
    };
    Ok(restricted_mle_with(samples, spec, &cfg)?.report)
}

/// Fixed-support EM, then free-support EM, then fixed-support EM on the
/// support it settled on. Returns the better of the two fixed-support runs.
fn local_search(samples: &SampleSet, init: &Signal, spec: &SignalClassSpec, cfg: &MleConfig) -> Result<EmRun> {
    let first = em_run(samples, init, spec, &cfg.em)?;
    if cfg.free_support_iters == 0 {
        return Ok(first);
    }
    let moved = free_support_em(samples, &first.estimate, spec, cfg.free_support_iters)?;
    if moved.iterations == 0 {
        return Ok(first);
    }
    match em_run(samples, &moved.estimate, spec, &cfg.em) {
        Ok(second) if second.nll < first.nll => Ok(EmRun {
            iterations: first.iterations + moved.iterations + second.iterations,
            passes: first.passes + moved.passes + second.passes,
            ..second
        }),
        _ => Ok(first),
    }
}

/// Multi-start EM. Starts: the moment estimate (a random class member if the
/// inversion fails), the second-moment starts, then random class members. Each start runs [`em_run`] and then [`free_support_em`], so its
/// support can move. With more than `screen_n` observations every start is
/// first run on a prefix of the sample and only the `polish` best are refined
/// by fixed-support EM on all of it. The lowest full-sample NLL wins, ties going to the earlier
/// start.
pub fn restricted_mle_with(samples: &SampleSet, spec: &SignalClassSpec, cfg: &MleConfig) -> Result<MleOutcome> {
    if cfg.restarts == 0 {
        return Err(Error::InvalidInput("restarts must be at least 1".into()));
    }
    let mut starts: Vec<(String, Signal)> = Vec::new();
    let mut notes = Vec::new();
    match mom_estimate_with(samples, spec, &MomConfig { tau_c: cfg.tau_c }) {
        Ok(r) => starts.push(("mom".into(), r.estimate)),
        Err(e) => {
            notes.push(format!("moment start unavailable: {e}"));
            let seed = rng::derive_seed(cfg.seed, &[0x6d6f6d]);
            starts.push(("mom-fallback".into(), sample_class_signal(spec, seed)?));
        }
    }
    if cfg.second_moment_candidates > 0 {
        let seed = rng::derive_seed(cfg.seed, &[0x6d32]);
        match second_moment_starts(samples, spec, cfg.second_moment_tries, cfg.second_moment_candidates, seed) {
            Ok(found) => {
                for (k, base) in found.into_iter().enumerate() {
                    starts.push((format!("m2-{k}"), base.clone()));
                    starts.push((format!("m2-{k}-neg"), base.negated()));
                    starts.push((format!("m2-{k}-refl"), base.reflected()));
                    starts.push((format!("m2-{k}-refl-neg"), base.reflected().negated()));
                }
            }
            Err(e) => notes.push(format!("second-moment starts unavailable: {e}")),
        }
    }
    for k in 1..cfg.restarts {
        let seed = rng::derive_seed(cfg.seed, &[k as u64]);
        starts.push((format!("random-{k}"), sample_class_signal(spec, seed)?));
    }

    let screening = cfg.screen_n > 0 && samples.n() > cfg.screen_n;
    let screen_set = if screening {
        samples.truncated(cfg.screen_n)
    } else {
        samples.clone()
    };
    let screened: Vec<Result<EmRun>> = starts
        .par_iter()
        .map(|(_, init)| local_search(&screen_set, init, spec, cfg))
        .collect();
    let screen_nlls: Vec<Option<f64>> = screened.iter().map(|r| r.as_ref().ok().map(|x| x.nll)).collect();
    let mut failures = Vec::new();
    for (i, r) in screened.iter().enumerate() {
        if let Err(e) = r {
            failures.push(format!("{}: {e}", starts[i].0));
        }
    }
    let mut iterations: usize = screened.iter().filter_map(|r| r.as_ref().ok()).map(|r| r.iterations).sum();

    let finals: Vec<Option<Result<EmRun>>> = if screening {
        let mut order: Vec<usize> = (0..starts.len()).filter(|&i| screen_nlls[i].is_some()).collect();
        order.sort_by(|&a, &b| screen_nlls[a].unwrap().total_cmp(&screen_nlls[b].unwrap()).then(a.cmp(&b)));
        order.truncate(cfg.polish.max(1));
        (0..starts.len())
            .into_par_iter()
            .map(|i| {
                if !order.contains(&i) {
                    return None;
                }
                let init = &screened[i].as_ref().expect("screened run succeeded").estimate;
                Some(em_run(samples, init, spec, &cfg.em))
            })
            .collect()
    } else {
        screened.into_iter().map(Some).collect()
    };
    let mut best: Option<(usize, &EmRun)> = None;
    for (i, r) in finals.iter().enumerate() {
        match r {
            Some(Ok(run)) => {
                if screening {
                    iterations += run.iterations;
                }
                if best.is_none_or(|(_, b)| run.nll < b.nll) {
                    best = Some((i, run));
                }
            }
            Some(Err(e)) if screening => failures.push(format!("{} (full sample): {e}", starts[i].0)),
            _ => {}
        }
    }
    let run_nlls: Vec<Option<f64>> = finals
        .iter()
        .map(|r| r.as_ref().and_then(|r| r.as_ref().ok()).map(|x| x.nll))
        .collect();
    let (best_idx, best_run) = best.ok_or_else(|| Error::AllStartsFailed(failures.join("; ")))?;
    notes.extend(failures.iter().map(|f| format!("start failed: {f}")));
    if screening {
        notes.push(format!("screened on {} of {} observations", cfg.screen_n, samples.n()));
    }
    notes.push(format!("best start: {}", starts[best_idx].0));

    let report = EstimateReport::new(
        best_run.estimate.clone(),
        Diagnostics {
            method: "mle".into(),
            iterations,
            final_nll: Some(best_run.nll),
            restarts: starts.len(),
            notes,
            ..Default::default()
        },
    );
    Ok(MleOutcome {
        report,
        run_nlls,
        screen_nlls,
        start_labels: starts.into_iter().map(|(l, _)| l).collect(),
    })
}

// ----------------------------------------------------------------- oracle ---

/// Largest number of candidates the grid oracle will evaluate.
pub const ORACLE_BUDGET: usize = 100_000;

/// Exhaustive minimization of the empirical NLL over collision-free supports
/// containing 0 (every orbit has such a member) and all assignments of nonzero
/// grid values. Ties keep the first candidate in enumeration order.
pub fn oracle_grid_mle(samples: &SampleSet, spec: &SignalClassSpec, grid: &[f64]) -> Result<EstimateReport> {
    let (l, s) = (spec.len, spec.sparsity);
    if l > 8 || s > 3 || grid.len() > 9 || grid.is_empty() {
        return Err(Error::InvalidInput(format!(
            "oracle needs L <= 8, s <= 3 and 1..=9 grid values (got L={l}, s={s}, {} values)",
            grid.len()
        )));
    }
    if samples.len_signal() != l {
        return Err(Error::LengthMismatch {
            expected: l,
            found: samples.len_signal(),
        });
    }
    let values: Vec<f64> = grid.iter().copied().filter(|v| *v != 0.0).collect();
    if values.is_empty() {
        return Err(Error::InvalidInput("grid has no nonzero value".into()));
    }
    let mut supports = Vec::new();
    let mut cur = vec![0usize];
    enumerate_supports(l, s, 1, &mut cur, &mut supports);
    let total = supports.len().saturating_mul(values.len().saturating_pow(s as u32));
    if total > ORACLE_BUDGET {
        return Err(Error::BudgetExceeded(format!("{total} candidates exceed {ORACLE_BUDGET}")));
    }
    let mut best: Option<(f64, Signal)> = None;
    let mut evaluated = 0;
    for supp in &supports {
        let mut idx = vec![0usize; s];
        loop {
            let vals: Vec<f64> = idx.iter().map(|&k| values[k]).collect();
            let cand = Signal::from_support(l, supp, &vals)?;
            let nll = empirical_nll(&cand, samples)?;
            evaluated += 1;
            if best.as_ref().is_none_or(|(b, _)| nll < *b) {
                best = Some((nll, cand));
            }
            // odometer
            let mut pos = 0;
            while pos < s {
                idx[pos] += 1;
                if idx[pos] < values.len() {
                    break;
                }
                idx[pos] = 0;
                pos += 1;
            }
            if pos == s {
                break;
            }
        }
    }
    let (nll, estimate) = best.ok_or_else(|| Error::Precondition("no collision-free support of this size".into()))?;
    Ok(EstimateReport::new(
        estimate,
        Diagnostics {
            method: "oracle".into(),
            iterations: evaluated,
            final_nll: Some(nll),
            restarts: 0,
            ..Default::default()
        },
    ))
}

fn enumerate_supports(l: usize, s: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if cur.len() == s {
        if DifferenceMultiset::from_support(cur, l).is_collision_free() {
            out.push(cur.clone());
        }
        return;
    }
    for x in start..l {
        cur.push(x);
        enumerate_supports(l, s, x + 1, cur, out);
        cur.pop();
    }
}
