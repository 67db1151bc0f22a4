use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mra_core::config::{ExperimentConfig, SigmaMode};
use mra_core::estimators::{mom_estimate_with, restricted_mle_with, MleConfig, MomConfig};
use mra_core::harness::{run_bound_audit, run_concentration, run_rate_sweep};
use mra_core::model::{sample_observations, NoiseSpec, SampleSet};
use mra_core::report::{emit_report, ExperimentReport};
use mra_core::rng::derive_seed;
use mra_core::signal::{sample_class_signal, Signal};
use mra_core::Error;

#[derive(Parser)]
#[command(name = "mra-lab", version, about = "Sparse multi-reference alignment laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a class signal and write `samples.csv` and `truth.txt`.
    Simulate(Common),
    /// Estimate a signal from a sample CSV; writes `estimate_<method>.json`.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Sample CSV written by `simulate`.
        #[arg(long)]
        input: PathBuf,
        /// Signal record to score the estimate against.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Estimation error against n and sigma.
    RateSweep(Common),
    /// Audit the divergence bounds on random pairs.
    BoundAudit(Common),
    /// Exceedance frequencies of the restricted MLE.
    Concentration {
        #[command(flatten)]
        common: Common,
        /// Exceedance radius (default: config `delta`, else m_lo / 2).
        #[arg(long)]
        delta: Option<f64>,
    },
}

enum Failure {
    Config(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidClass(_) => Failure::Config(e.to_string()),
            _ => Failure::Run(e.to_string()),
        }
    }
}

fn load(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| match e {
            Error::Io { .. } => Failure::Config(e.to_string()),
            e => e.into(),
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    if let Some(t) = common.threads {
        if t == 0 {
            return Err(Failure::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Failure::Run(e.to_string()))?;
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Run(format!("{}: {e}", path.display())))
}

fn out_dir(cfg: &ExperimentConfig) -> Result<&Path, Failure> {
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Failure::Run(format!("{}: {e}", cfg.output_dir.display())))?;
    Ok(&cfg.output_dir)
}

fn simulate(common: &Common) -> Result<bool, Failure> {
    let cfg = load(common)?;
    let theta = sample_class_signal(&cfg.spec, derive_seed(cfg.seed, &[0]))?;
    let sigma = match cfg.sigma_mode {
        SigmaMode::Relative => cfg.sigma_list[0] * theta.norm(),
        SigmaMode::Absolute => cfg.sigma_list[0],
    };
    let samples = sample_observations(&theta, NoiseSpec::new(sigma)?, cfg.n_list[0], derive_seed(cfg.seed, &[1]))?;
    let dir = out_dir(&cfg)?;
    write(&dir.join("samples.csv"), &samples.to_csv())?;
    write(&dir.join("truth.txt"), &theta.to_record())?;
    println!("wrote {} observations of length {} (sigma {sigma:.6})", samples.n(), samples.len_signal());
    Ok(true)
}

fn estimate(common: &Common, input: &Path, truth: Option<&Path>) -> Result<bool, Failure> {
    let cfg = load(common)?;
    let read = |p: &Path| fs::read_to_string(p).map_err(|e| Failure::Run(format!("{}: {e}", p.display())));
    let samples = SampleSet::from_csv(read(input)?.as_bytes())?;
    if samples.len_signal() != cfg.spec.len {
        return Err(Failure::Config(format!(
            "samples have length {} but the class has L = {}",
            samples.len_signal(),
            cfg.spec.len
        )));
    }
    let truth = truth.map(|p| read(p).and_then(|t| Signal::from_record(&t).map_err(Failure::from))).transpose()?;
    let dir = out_dir(&cfg)?.to_path_buf();
    let tau_c = cfg.constant("tau_c", 3.0);
    let mut ok = true;
    for &name in cfg.estimator.names() {
        let report = match name {
            "mom" => mom_estimate_with(&samples, &cfg.spec, &MomConfig { tau_c }),
            _ => restricted_mle_with(
                &samples,
                &cfg.spec,
                &MleConfig {
                    restarts: cfg.restarts,
                    seed: cfg.seed,
                    tau_c,
                    ..MleConfig::default()
                },
            )
            .map(|o| o.report),
        };
        match report.and_then(|r| match &truth {
            Some(t) => r.with_truth(t),
            None => Ok(r),
        }) {
            Ok(r) => {
                write(&dir.join(format!("estimate_{name}.json")), &format!("{}\n", r.to_json()))?;
                match r.error_rho {
                    Some(e) => println!("{name}: error {e:.6}"),
                    None => println!("{name}: done"),
                }
            }
            Err(e) => {
                eprintln!("{name}: {e}");
                ok = false;
            }
        }
    }
    Ok(ok)
}

fn finish(cfg: &ExperimentConfig, report: &ExperimentReport) -> Result<bool, Failure> {
    emit_report(report, &cfg.output_dir)?;
    for c in &report.checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(report.pass())
}

fn run(cli: Cli) -> Result<bool, Failure> {
    match &cli.command {
        Command::Simulate(c) => simulate(c),
        Command::Estimate { common, input, truth } => estimate(common, input, truth.as_deref()),
        Command::RateSweep(c) => {
            let cfg = load(c)?;
            finish(&cfg, &run_rate_sweep(&cfg)?)
        }
        Command::BoundAudit(c) => {
            let cfg = load(c)?;
            finish(&cfg, &run_bound_audit(&cfg)?)
        }
        Command::Concentration { common, delta } => {
            let mut cfg = load(common)?;
            if delta.is_some() {
                cfg.delta = *delta;
                cfg.validate()?;
            }
            let d = cfg.delta_or_default();
            finish(&cfg, &run_concentration(&cfg, d)?)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Run(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
