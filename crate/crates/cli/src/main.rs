use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use sdaf_cli::{run, Experiment, RunOptions};

/// Perturbed alpha-Dirac-harmonic maps on flat spin tori.
#[derive(Debug, Parser)]
#[command(name = "sdaf", version)]
struct Args {
    #[arg(value_enum)]
    experiment: Experiment,

    #[arg(long)]
    config: PathBuf,

    /// Output directory (default `sdaf-out`).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Replaces the config seed.
    #[arg(long)]
    seed: Option<u64>,

    /// `key.path=value`, repeatable; values use TOML syntax.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let opts = RunOptions {
        out: args.out,
        seed: args.seed,
        overrides: args.overrides,
    };
    match run(args.experiment, &args.config, &opts) {
        Ok(outcome) => {
            print!("{}", sdaf_cli::runner::summary(&outcome.report));
            println!("output      {}", outcome.out_dir.display());
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
