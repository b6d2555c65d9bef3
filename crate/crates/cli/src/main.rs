mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mspt::ErrorKind;

/// Multi-scale prototypical transformer experiments on feature bags.
///
/// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
/// failure.
#[derive(Debug, Parser)]
#[command(name = "mspt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-scale dataset from a generator config.
    Gen {
        /// Generator config JSON.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Extract and cache per-bag K-means prototypes at every scale.
    Cluster {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// K-means config JSON; flags override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        restarts: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model per fold and report test metrics.
    Train(RunArgs),
    /// Re-evaluate the models saved by `train`.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Also write prototype attention maps and pooling weights.
        #[arg(long)]
        dump_attention: bool,
    },
    /// Sweep the prototype count for PT and Prototype-bag, with Full-bag as reference.
    AblateK {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated prototype counts.
        #[arg(long, value_delimiter = ',')]
        k_values: Option<Vec<usize>>,
    },
    /// Compare multi-scale fusion strategies against the Mixer fusion.
    AblateFusion(RunArgs),
    /// Time prototype attention against dense self-attention.
    Bench {
        /// Run config JSON; only its `bench` section is read.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated bag sizes for the prototype path.
        #[arg(long)]
        n_values: Option<String>,
        /// Comma-separated bag sizes for dense attention; empty for none.
        #[arg(long)]
        dense_n_values: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a dataset container against its manifest without reading matrices.
    Validate {
        #[arg(long)]
        data: PathBuf,
    },
}

/// Config file plus the overrides shared by the experiment commands.
#[derive(Debug, Args)]
struct RunArgs {
    /// Run config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    protos_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Sets every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    model: Option<String>,
    /// Prototypes per scale for training.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Early-stopping patience in epochs.
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    k_folds: Option<usize>,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
