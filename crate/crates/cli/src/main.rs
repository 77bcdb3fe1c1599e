use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use switchdiff_cli::commands::{run_command, CmdContext};
use switchdiff_cli::config::RunConfig;

/// Fairness-aware diffusion sampling laboratory.
///
/// Exit codes: 0 on success, 1 on usage/config/input errors, 2 when a
/// numerical failure (divergence, non-finite values) aborts a run.
#[derive(Debug, Parser)]
#[command(name = "switchdiff", version, about, long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides out_dir from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run seed; overrides seed from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a labeled dataset from the ground-truth mixture.
    Generate(CommonArgs),
    /// Train the conditional denoiser and save a checkpoint.
    Train(CommonArgs),
    /// Generate points under the configured strategy and integrator.
    Sample(CommonArgs),
    /// Search for the fair transition step and dump the full trace.
    FindTau(CommonArgs),
    /// Sweep the transition step across the schedule and measure quality.
    SweepTau(CommonArgs),
    /// Cross-evaluate a synthetic CSV against a reference CSV.
    Evaluate(CommonArgs),
    /// Project point clouds onto the reference data's principal plane.
    Pca(CommonArgs),
}

impl Command {
    fn split(&self) -> (&'static str, &CommonArgs) {
        match self {
            Command::Generate(a) => ("generate", a),
            Command::Train(a) => ("train", a),
            Command::Sample(a) => ("sample", a),
            Command::FindTau(a) => ("find-tau", a),
            Command::SweepTau(a) => ("sweep-tau", a),
            Command::Evaluate(a) => ("evaluate", a),
            Command::Pca(a) => ("pca", a),
        }
    }
}

fn run(name: &str, args: &CommonArgs) -> switchdiff_core::Result<()> {
    let (config, bytes) = RunConfig::load(&args.config)?;
    let ctx = CmdContext::new(&config, &bytes, args.out.clone(), args.seed)?;
    run_command(name, &ctx)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    let (name, args) = cli.command.split();
    match run(name, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(if err.is_numerical() { 2 } else { 1 })
        }
    }
}
