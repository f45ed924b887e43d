use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nullctl::experiment::{run_suite, ExperimentConfig, Suite};

/// Null-control experiments for the stochastic heat equation.
#[derive(Parser)]
#[command(name = "nullctl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Discrete calculus identities on random grid functions.
    CheckCalculus(Common),
    /// Carleman weights, admissibility and expansion orders.
    Weights(Common),
    /// Forward simulation, duality and Monte Carlo checks.
    Simulate(Common),
    /// Linear penalized HUM solve.
    HumLinear(Common),
    /// Semilinear HUM solve by Picard iteration.
    HumSemilinear(Common),
    /// Empirical Carleman ratio across meshes.
    CarlemanCheck(Common),
    /// Terminal-decay sweep over the mesh list.
    DecaySweep(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Write per-node dumps (weights.csv, trajectory.csv).
    #[arg(long)]
    dump: bool,
}

fn run(suite: Suite, args: Common) -> Result<bool, nullctl::Error> {
    let mut config = match &args.config {
        Some(p) => ExperimentConfig::from_path(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = args.seed {
        config.run.seed = s;
    }
    if let Some(j) = args.jobs {
        config.run.jobs = j;
    }
    if let Some(o) = args.out {
        config.run.out_dir = o;
    }
    let outcome = run_suite(&config, suite, args.dump)?;
    outcome.write(&config, &config.run.out_dir)?;
    print!("{}", outcome.summary());
    for c in outcome.failures() {
        eprintln!("contract failed: {}", c.name);
    }
    Ok(outcome.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (suite, args) = match cli.command {
        Command::CheckCalculus(a) => (Suite::Calculus, a),
        Command::Weights(a) => (Suite::Weights, a),
        Command::Simulate(a) => (Suite::Simulate, a),
        Command::HumLinear(a) => (Suite::HumLinear, a),
        Command::HumSemilinear(a) => (Suite::HumSemilinear, a),
        Command::CarlemanCheck(a) => (Suite::Carleman, a),
        Command::DecaySweep(a) => (Suite::Decay, a),
    };
    match run(suite, args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
