//! Flat `key = value` experiment configuration. Lists are comma separated,
//! `#` starts a comment, unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{first_collision_free_support, SignalClassSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorChoice {
    Mom,
    Mle,
    Both,
}

impl EstimatorChoice {
    pub fn names(self) -> &'static [&'static str] {
        match self {
            Self::Mom => &["mom"],
            Self::Mle => &["mle"],
            Self::Both => &["mom", "mle"],
        }
    }
}

/// How `sigma_list` is read: multiples of the trial's `||theta||`, or
/// absolute noise levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaMode {
    Relative,
    Absolute,
}

/// `Grid` runs every `(sigma, n)` pair. `Matched` pairs `sigma_list[i]` with
/// `n_list[0] (sigma_i / sigma_0)^4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Design {
    Grid,
    Matched,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub spec: SignalClassSpec,
    pub sigma_list: Vec<f64>,
    pub n_list: Vec<usize>,
    pub trials: usize,
    pub estimator: EstimatorChoice,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub sigma_mode: SigmaMode,
    pub design: Design,
    /// Rejects noise levels below the largest class norm.
    pub enforce_regime: bool,
    /// Record real wall-clock times; off keeps outputs byte-reproducible.
    pub timing: bool,
    pub restarts: usize,
    /// Exceedance radius for the concentration experiment; `None` is `m_lo / 2`.
    pub delta: Option<f64>,
    pub audit_pairs: usize,
    pub mc_samples: usize,
    /// Optional acceptance band for the slope against `n`.
    pub slope_n_range: Option<(f64, f64)>,
    /// Optional cap on max/min median error across cells.
    pub max_error_ratio: Option<f64>,
    /// Named constants: `lecam_c`, `tau_c`, `eps0`, `c_bar` (absent means
    /// the explicit remainder), `c_s`, `c_tilde_s`.
    pub constants: BTreeMap<String, f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let constants = [("lecam_c", 1.0), ("tau_c", 3.0), ("eps0", 0.1), ("c_s", 1.0), ("c_tilde_s", 1.0)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        Self {
            spec: SignalClassSpec::default(),
            sigma_list: vec![2.0],
            n_list: vec![1024],
            trials: 5,
            estimator: EstimatorChoice::Mle,
            seed: 0,
            output_dir: PathBuf::from("out"),
            sigma_mode: SigmaMode::Relative,
            design: Design::Grid,
            enforce_regime: false,
            timing: false,
            restarts: 4,
            delta: None,
            audit_pairs: 20,
            mc_samples: 100_000,
            slope_n_range: None,
            max_error_ratio: None,
            constants,
        }
    }
}

const CONSTANT_KEYS: [&str; 6] = ["lecam_c", "tau_c", "eps0", "c_bar", "c_s", "c_tilde_s"];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| parse_num(key, t))
        .collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{v}`"))),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let (mut len, mut s, mut m_lo, mut m_hi, mut eps) =
            (cfg.spec.len, cfg.spec.sparsity, cfg.spec.m_lo, cfg.spec.m_hi, cfg.spec.eps);
        let mut relaxed = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, v) = (key.trim(), value.trim());
            match key {
                "L" | "len" => len = parse_num(key, v)?,
                "s" | "sparsity" => s = parse_num(key, v)?,
                "m_lo" => m_lo = parse_num(key, v)?,
                "m_hi" | "M_hi" => m_hi = parse_num(key, v)?,
                "eps" => eps = parse_num(key, v)?,
                "relaxed_class" => relaxed = parse_bool(key, v)?,
                "sigma_list" => cfg.sigma_list = parse_list(key, v)?,
                "n_list" => cfg.n_list = parse_list(key, v)?,
                "trials" => cfg.trials = parse_num(key, v)?,
                "estimator" => {
                    cfg.estimator = match v {
                        "mom" => EstimatorChoice::Mom,
                        "mle" => EstimatorChoice::Mle,
                        "both" => EstimatorChoice::Both,
                        _ => return Err(Error::Config(format!("unknown estimator `{v}`"))),
                    }
                }
                "seed" => cfg.seed = parse_num(key, v)?,
                "output_dir" => cfg.output_dir = PathBuf::from(v),
                "sigma_mode" => {
                    cfg.sigma_mode = match v {
                        "relative" => SigmaMode::Relative,
                        "absolute" => SigmaMode::Absolute,
                        _ => return Err(Error::Config(format!("unknown sigma_mode `{v}`"))),
                    }
                }
                "design" => {
                    cfg.design = match v {
                        "grid" => Design::Grid,
                        "matched" => Design::Matched,
                        _ => return Err(Error::Config(format!("unknown design `{v}`"))),
                    }
                }
                "enforce_regime" => cfg.enforce_regime = parse_bool(key, v)?,
                "timing" => cfg.timing = parse_bool(key, v)?,
                "restarts" => cfg.restarts = parse_num(key, v)?,
                "delta" => cfg.delta = Some(parse_num(key, v)?),
                "audit_pairs" => cfg.audit_pairs = parse_num(key, v)?,
                "mc_samples" => cfg.mc_samples = parse_num(key, v)?,
                "slope_n_range" => {
                    let r: Vec<f64> = parse_list(key, v)?;
                    if r.len() != 2 || r[0] > r[1] {
                        return Err(Error::Config("`slope_n_range` needs `lo, hi`".into()));
                    }
                    cfg.slope_n_range = Some((r[0], r[1]));
                }
                "max_error_ratio" => cfg.max_error_ratio = Some(parse_num(key, v)?),
                k if CONSTANT_KEYS.contains(&k) => {
                    cfg.constants.insert(k.to_string(), parse_num(key, v)?);
                }
                _ => return Err(Error::Config(format!("unknown key `{key}`"))),
            }
        }
        cfg.spec = if relaxed {
            SignalClassSpec::relaxed(len, s, m_lo, m_hi, eps)
        } else {
            SignalClassSpec::new(len, s, m_lo, m_hi, eps)
        }
        .map_err(|e| Error::Config(e.to_string()))?;
        first_collision_free_support(len, s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.sigma_list.is_empty() || self.n_list.is_empty() {
            return bad("sigma_list and n_list must be nonempty".into());
        }
        if let Some(&v) = self.sigma_list.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return bad(format!("noise levels must be positive, got {v}"));
        }
        if self.n_list.contains(&0) {
            return bad("sample sizes must be positive".into());
        }
        if self.restarts == 0 {
            return bad("restarts must be at least 1".into());
        }
        if self.mc_samples < 100 {
            return bad("mc_samples must be at least 100".into());
        }
        if self.design == Design::Matched && self.n_list.len() != 1 {
            return bad("the matched design takes a single base sample size".into());
        }
        if let Some(d) = self.delta {
            let dmax = 2.0 * (self.spec.len as f64).sqrt() * self.spec.m_hi;
            if !(d > 0.0 && d < dmax) {
                return bad(format!("delta must lie in (0, {dmax}), got {d}"));
            }
        }
        if self.enforce_regime {
            let floor = match self.sigma_mode {
                SigmaMode::Relative => 1.0,
                SigmaMode::Absolute => self.spec.max_norm(),
            };
            if let Some(&v) = self.sigma_list.iter().find(|v| **v < floor) {
                return bad(format!("sigma {v} is below the class norm bound {floor}"));
            }
        }
        Ok(())
    }

    pub fn constant(&self, key: &str, default: f64) -> f64 {
        self.constants.get(key).copied().unwrap_or(default)
    }

    /// `(sigma index, sigma, n index, n)` for every scheduled cell.
    pub fn cells(&self) -> Vec<(usize, f64, usize, usize)> {
        match self.design {
            Design::Grid => self
                .sigma_list
                .iter()
                .enumerate()
                .flat_map(|(i, &s)| self.n_list.iter().enumerate().map(move |(j, &n)| (i, s, j, n)))
                .collect(),
            Design::Matched => {
                let s0 = self.sigma_list[0];
                self.sigma_list
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| {
                        let n = (self.n_list[0] as f64 * (s / s0).powi(4)).round().max(1.0) as usize;
                        (i, s, 0, n)
                    })
                    .collect()
            }
        }
    }

    /// Concentration radius, defaulting to `m_lo / 2`.
    pub fn delta_or_default(&self) -> f64 {
        self.delta.unwrap_or(self.spec.m_lo / 2.0)
    }
}
