use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, warn};

use seqcal::model::Method;
use seqcal_cli::{pipeline, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "seqcal", version, about = "Uncertainty-calibrated sequence generation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Restrict the command to one method.
    #[arg(long)]
    method: Option<Method>,
    /// Replace the global and corpus seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its train/dev/test splits.
    GenData(Common),
    /// Train model bundles.
    Train(Common),
    /// Decode the test split and score hypotheses.
    Infer(Common),
    /// Compute calibration and selective-generation reports.
    Eval(Common),
}

fn run(cli: Cli) -> seqcal::Result<()> {
    let (Command::GenData(c) | Command::Train(c) | Command::Infer(c) | Command::Eval(c)) = &cli.command;
    let overrides = Overrides {
        seed: c.seed,
        out_dir: c.out.clone(),
    };
    let config = RunConfig::load(&c.config, &overrides)?;
    let methods = match c.method {
        Some(m) => vec![m],
        None => config.methods.clone(),
    };
    match cli.command {
        Command::GenData(_) => {
            if c.method.is_some() {
                warn!("--method has no effect on gen-data");
            }
            pipeline::gen_data(&config)?;
        }
        Command::Train(_) => {
            for m in methods {
                pipeline::train_method(&config, m)?;
            }
        }
        Command::Infer(_) => {
            for m in methods {
                pipeline::infer_method(&config, m)?;
            }
        }
        Command::Eval(_) => {
            pipeline::eval(&config, &methods)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
