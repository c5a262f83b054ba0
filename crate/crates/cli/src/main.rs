use std::path::PathBuf;
use std::process::ExitCode;

use bundleflag_cli::{run, Command, JobConfig, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bundleflag", version, about = "Flat subbundles, parallel sections and metric checks for connections")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Derived flag: rank sequence and limit fiber at the base point.
    Analyze(Args),
    /// Parallel sections through the base point, one CSV grid each.
    Sections(Args),
    /// Decide whether the tangent-bundle connection is locally metric.
    MetricCheck(Args),
    /// Transport the [transport] vector along the [transport] path.
    Transport(Args),
}

#[derive(clap::Args)]
struct Args {
    /// Job file.
    #[arg(long)]
    config: PathBuf,
    /// Relative singular-value cutoff, overriding [tolerances] rank.
    #[arg(long)]
    tol_rank: Option<f64>,
    /// Lattice points on every axis, overriding [chart] grid.
    #[arg(long)]
    grid: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn execute(command: Command, args: &Args) -> Result<String> {
    let mut config = JobConfig::load(&args.config)?;
    if let Some(n) = args.grid {
        config = config.with_grid(n)?;
    }
    if let Some(t) = args.tol_rank {
        config = config.with_tol_rank(t)?;
    }
    run(command, &config, args.out.as_deref())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match &cli.command {
        Cmd::Analyze(a) => (Command::Analyze, a),
        Cmd::Sections(a) => (Command::Sections, a),
        Cmd::MetricCheck(a) => (Command::MetricCheck, a),
        Cmd::Transport(a) => (Command::Transport, a),
    };
    match execute(command, args) {
        Ok(json) => {
            print!("{json}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
