use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use feddlr_cli::{run_experiment, CliError, Command, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "feddlr",
    version,
    about = "Federated learning with dual-side low-rank compression"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// TOML config; missing keys take the reference defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Only print errors
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// One training run
    Run,
    /// FedAvg and FedDLR from the same seed
    Compare,
    /// FedDLR for each threshold in `sweep_e`
    SweepE,
    /// Static MAC and parameter report for the configured architecture
    Macs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match execute(&cli) {
        Ok(lines) => {
            if !cli.quiet {
                lines.iter().for_each(|l| println!("{l}"));
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(cli: &Cli) -> Result<Vec<String>, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    let cmd = match cli.command {
        Cmd::Run => Command::Run,
        Cmd::Compare => Command::Compare,
        Cmd::SweepE => Command::SweepE,
        Cmd::Macs => Command::Macs,
    };
    let out = run_experiment(cmd, &cfg)?;
    let mut lines = out.report;
    lines.extend(out.files.iter().map(|f| format!("wrote {}", f.display())));
    Ok(lines)
}
