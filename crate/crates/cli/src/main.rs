mod commands;
mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Failure;
use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "fgm",
    version,
    about = "Train and check f-divergence generative models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the configured synthetic dataset to `data.csv` plus a JSON sidecar.
    GenData(Common),
    /// Run the minimax training loop.
    Train(Common),
    /// Verify the objective identities on a linear-Gaussian target.
    Check(Common),
    /// Recompute metrics for a saved checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load(common: &Common) -> Result<(RunConfig, PathBuf), Failure> {
    let mut cfg = RunConfig::from_path(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| Path::new("fgm_out").into());
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData(c) => {
            let (cfg, out) = load(&c)?;
            commands::gen_data(&cfg, &out)
        }
        Command::Train(c) => {
            let (cfg, out) = load(&c)?;
            commands::train(&cfg, &out)
        }
        Command::Check(c) => {
            let (cfg, out) = load(&c)?;
            commands::check(&cfg, &out)
        }
        Command::Eval { common, checkpoint } => {
            let (cfg, out) = load(&common)?;
            commands::eval(&cfg, &checkpoint, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(e) => eprintln!("error: {e:#}"),
                Failure::Numerical(e) => eprintln!("numerical failure: {e:#}"),
                Failure::Check => eprintln!("one or more checks failed; see check_report.json"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}
