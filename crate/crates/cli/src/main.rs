use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use qmem_cli::{run, Command, RunConfig};

/// Measurement-based LQG control and initial-point smoothing for linear
/// quantum memories.
#[derive(Debug, Parser)]
#[command(name = "qmem", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Scenario JSON file.
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory for CSV files and summary.json.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the number of grid steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Monte Carlo path count.
    #[arg(long)]
    paths: Option<usize>,
    /// Monte Carlo base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Decoherence threshold fraction.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Decoherence reference scale.
    #[arg(long = "phi-star")]
    phi_star: Option<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let config = RunConfig {
        command: cli.command,
        scenario: cli.scenario,
        out: cli.out,
        steps: cli.steps,
        paths: cli.paths,
        seed: cli.seed,
        epsilon: cli.epsilon,
        phi_star: cli.phi_star,
    };
    match run(&config) {
        Ok(summary) if summary.succeeded() => ExitCode::SUCCESS,
        Ok(summary) => {
            for breach in &summary.breaches {
                eprintln!("breach: {breach}");
            }
            ExitCode::from(1)
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
