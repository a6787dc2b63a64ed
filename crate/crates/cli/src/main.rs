use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use cshrink::calculus::DEFAULT_FD_STEP;
use cshrink::estimators::{estimate, EstimateInputs, EstimatorKind, EstimatorSpec, BUILTIN_NAMES};
use cshrink::harness::{parse_json, read_config_json, run_experiment, write_report_csv};
use cshrink::verify::{calculus_suite, stein_haff_suite, stein_suite, SuiteReport};
use cshrink::{CMatrix, Error};

const EXIT_VERIFY_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "cshrink", version, about = "Shrinkage estimators for complex normal mean matrices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte Carlo risk experiment and write a CSV report.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo check of the complex Stein identity.
    VerifyStein {
        #[arg(long, default_value_t = 2)]
        p: usize,
        #[arg(long, default_value_t = 100_000)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Monte Carlo check of the complex Stein-Haff identity.
    VerifySteinHaff {
        #[arg(long, default_value_t = 2)]
        p: usize,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 100_000)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Compare closed-form eigen-derivatives and divergences with finite differences.
    VerifyCalculus {
        #[arg(long)]
        m: usize,
        #[arg(long)]
        p: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_FD_STEP)]
        fd_step: f64,
        #[arg(long, default_value_t = 10)]
        instances: usize,
    },
    /// Apply one estimator to a single observation.
    Estimate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(BUILTIN_NAMES))]
        estimator: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EstimateInput {
    z: CMatrix,
    #[serde(default)]
    s: Option<CMatrix>,
    #[serde(default)]
    n: Option<usize>,
    #[serde(default)]
    sigma: Option<CMatrix>,
    #[serde(default)]
    k: Option<CMatrix>,
}

enum Failure {
    Usage(Error),
    Verification,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Usage(e)
    }
}

fn print_suite(report: &SuiteReport) -> Result<(), Failure> {
    print!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Verification)
    }
}

fn simulate(config: &Path, out: &Path) -> Result<(), Failure> {
    let cfg = read_config_json(config)?;
    let reports = run_experiment(&cfg)?;
    write_report_csv(&reports, out)?;
    for r in &reports {
        eprintln!(
            "{:<16} risk {:>10.4} ± {:<8.4} ure {:>10.4}  baseline {}  used {}/{}",
            r.estimator_id,
            r.empirical_risk,
            r.risk_se,
            r.ure_mean,
            r.baseline,
            r.reps_used,
            r.reps_used + r.discarded
        );
    }
    Ok(())
}

fn run_estimate(input: &Path, name: &str, out: &Path) -> Result<(), Failure> {
    let text = fs::read_to_string(input).map_err(|e| Error::Io(format!("{}: {e}", input.display())))?;
    let data: EstimateInput = parse_json(&text).map_err(|e| match e {
        Error::ConfigParse(msg) => Error::ConfigParse(format!("{}: {msg}", input.display())),
        other => other,
    })?;
    let kind = EstimatorKind::from_name(name).ok_or_else(|| Error::ConfigInvalid(format!("unknown estimator {name}")))?;
    let spec = EstimatorSpec::of(kind);
    let inputs = EstimateInputs { s: data.s.as_ref(), n: data.n, sigma: data.sigma.as_ref(), k: data.k.as_ref() };
    let xi_hat = estimate(&spec, &data.z, inputs)?;
    let json = serde_json::to_string_pretty(&xi_hat).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(out, json + "\n").map_err(|e| Error::Io(format!("{}: {e}", out.display())))?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate { config, out } => simulate(&config, &out),
        Command::VerifyStein { p, reps, seed } => print_suite(&stein_suite(p, reps, seed)?),
        Command::VerifySteinHaff { p, n, reps, seed } => print_suite(&stein_haff_suite(p, n, reps, seed)?),
        Command::VerifyCalculus { m, p, seed, fd_step, instances } => {
            print_suite(&calculus_suite(m, p, seed, fd_step, instances)?)
        }
        Command::Estimate { input, estimator, out } => run_estimate(&input, &estimator, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification) => ExitCode::from(EXIT_VERIFY_FAILED),
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
