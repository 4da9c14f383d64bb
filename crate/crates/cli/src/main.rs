mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Config, ConfigError};

#[derive(Parser, Debug)]
#[command(name = "mcdrop", version, about = "Fast Monte Carlo dropout open-set RF classification")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Root seed; every random stream is derived from it by label.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory. Commands producing one CSV print it to stdout when
    /// omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra key=value assignment applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run every loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic transmitter dataset.
    GenData,
    /// Train the network on the known transmitters of a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Per-record ensemble decisions of both algorithms.
    Classify {
        #[arg(long)]
        weights: PathBuf,
        /// Dataset directory; its test split is classified.
        #[arg(long, required_unless_present = "stdin", conflicts_with = "stdin")]
        data: Option<PathBuf>,
        /// Read records from stdin, one per line as 2000 comma-separated
        /// values I0,Q0,I1,Q1,...
        #[arg(long)]
        stdin: bool,
        /// Append the averaged distribution to every row.
        #[arg(long)]
        full: bool,
    },
    /// Accuracy versus λ for every signal type and algorithm.
    Sweep {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Trunk and head pass timing of the reference network.
    Bench,
    /// Closed-form and brute-force correction gain on synthetic softmax models.
    Delta,
    /// Print the effective configuration.
    Config,
}

fn config(common: &Common) -> Result<Config, ConfigError> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for a in &common.set {
        cfg.set(a)?;
    }
    if let Some(s) = common.seed {
        cfg.set(&format!("seed={s}"))?;
    }
    Ok(cfg)
}

/// 2 for configuration errors, 3 for incompatible data or weights, 1 else.
fn exit_code(err: &anyhow::Error) -> u8 {
    use mcdrop::Error as E;
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<E>() {
        Some(E::InvalidParams(_)) => 2,
        Some(
            E::Incompatible(_) | E::WeightFormat(_) | E::UnsupportedVersion(_) | E::Dataset(_) | E::ShapeMismatch { .. },
        ) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = config(&cli.common).map_err(anyhow::Error::from).and_then(|cfg| run::dispatch(&cli, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
