//! `hegp`: simulate data, fit models, predict, evaluate, select σ₀, compare.
//!
//! Exit codes: 0 success, 1 invalid usage, configuration or input, 2 I/O
//! failure, 3 training diverged.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hegp::sim::{Method, ScenarioKind};
use hegp::HegpError;

#[derive(Parser, Debug)]
#[command(name = "hegp", version, about = "Heteroscedastic multi-output Gaussian processes")]
pub struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed overriding the configuration and scenario seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset and its ground truth.
    Simulate(SimulateArgs),
    /// Train a model and write the model file.
    Fit(FitArgs),
    /// Posterior predictive summaries at query covariates.
    Predict(PredictArgs),
    /// Calibration, CvM and, with ground truth, AKLD of a fitted model.
    Evaluate(EvaluateArgs),
    /// Choose σ₀ for the outlier model by the Cramér–von Mises score.
    SelectSigma0(SelectArgs),
    /// Fit several methods on one dataset and tabulate their scores.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long, value_parser = parse_scenario)]
    pub scenario: ScenarioKind,
    /// Number of training points (scenario default when omitted).
    #[arg(long)]
    pub n: Option<usize>,
    /// Fraction of responses replaced by outliers.
    #[arg(long)]
    pub contamination: Option<f64>,
    /// Output directory for data.csv and truth.json.
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON configuration (defaults when omitted).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model file to write.
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// CSV of query covariates with columns x_1..x_P.
    #[arg(long, conflicts_with = "grid", required_unless_present = "grid")]
    pub query: Option<PathBuf>,
    /// Regular grid `lo:hi:count` repeated over every covariate dimension.
    #[arg(long)]
    pub grid: Option<String>,
    /// Prediction CSV to write.
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Ground-truth JSON written by `simulate`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Report JSON to write.
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SelectArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for report.json and the selected model.json.
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated subset of hogp, hegpr-g, hegpr-o.
    #[arg(long, value_delimiter = ',', value_parser = parse_method, default_value = "hogp,hegpr-g,hegpr-o")]
    pub methods: Vec<Method>,
    /// Output directory for report.json and report.csv.
    #[arg(short, long)]
    pub out: PathBuf,
}

fn parse_scenario(s: &str) -> Result<ScenarioKind, String> {
    s.parse().map_err(|e: HegpError| e.to_string())
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: HegpError| e.to_string())
}

/// Stable process exit code for an error.
pub fn exit_code(e: &HegpError) -> u8 {
    match e {
        HegpError::Io(_) => 2,
        HegpError::Diverged { .. } | HegpError::AtIteration { .. } => 3,
        _ => 1,
    }
}

fn init_logging() {
    let env = env_logger::Env::default().filter_or("HEGP_LOG", "warn");
    env_logger::Builder::from_env(env).format_timestamp(None).init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: cannot configure {t} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_stable() {
        let io = HegpError::Io(std::io::Error::new(std::io::ErrorKind::NotFound, "x"));
        assert_eq!(exit_code(&io), 2);
        assert_eq!(exit_code(&HegpError::Config("x".into())), 1);
        assert_eq!(exit_code(&HegpError::Parse("x".into())), 1);
        assert_eq!(exit_code(&HegpError::Diverged { iteration: 4, message: "x".into() }), 3);
        let wrapped = HegpError::LinAlg("x".into()).at(7);
        assert_eq!(exit_code(&wrapped), 3);
        assert!(wrapped.to_string().contains('7'));
    }
}
