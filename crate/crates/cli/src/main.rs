use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dtn_cli::{cmd_datagen, cmd_diagnose, cmd_distill, cmd_eval, cmd_train, config, init_threads, CliResult};

#[derive(Parser)]
#[command(name = "dtn", version, about = "Train, distill and inspect DTN forgery detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Replaces one config field, e.g. `train.lr=0.001`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct DataArg {
    /// Dataset directory written by `datagen`; generated from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Datagen {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Initial training followed by self-distillation generations.
    Distill {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Test-split metrics of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArg,
    },
    /// Attention statistics, saliency maps and pooled features of a checkpoint.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArg,
    },
}

fn run(cli: Cli) -> CliResult<PathBuf> {
    init_threads()?;
    let load = |c: &Common| config::load(&c.config, &c.overrides);
    match cli.command {
        Command::Datagen { common } => cmd_datagen(&load(&common)?),
        Command::Train { common, data } => cmd_train(&load(&common)?, data.data.as_deref()),
        Command::Distill { common, data } => cmd_distill(&load(&common)?, data.data.as_deref()),
        Command::Eval {
            common,
            checkpoint,
            data,
        } => cmd_eval(&load(&common)?, &checkpoint, data.data.as_deref()),
        Command::Diagnose {
            common,
            checkpoint,
            data,
        } => cmd_diagnose(&load(&common)?, &checkpoint, data.data.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(dir) => {
            log::info!("outputs in {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
