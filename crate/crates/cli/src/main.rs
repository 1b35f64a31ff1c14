use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use coprefl_cli::commands::{self, CliError};
use coprefl_cli::Overrides;

#[derive(Debug, Parser)]
#[command(name = "coprefl", version, about = "Federated pre-training simulator")]
struct Cli {
    /// Override the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pre-train a model with `pretrain.method`.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a saved model on the downstream task suite.
    Downstream {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train every method in `pretrain.methods` and compare downstream.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the balancer over the given values.
    GammaSweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        gammas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(CliError::Invalid("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let overrides = Overrides { seed: cli.seed };
    match cli.command {
        Command::Pretrain { config, out } => commands::cmd_pretrain(&config, &out, &overrides),
        Command::Downstream { config, model, out } => {
            commands::cmd_downstream(&config, &model, &out, &overrides)
        }
        Command::Compare { config, out } => commands::cmd_compare(&config, &out, &overrides),
        Command::GammaSweep {
            config,
            gammas,
            out,
        } => commands::cmd_gamma_sweep(&config, &gammas, &out, &overrides),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
