mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Composed image retrieval with unified multimodal queries.
#[derive(Debug, Parser)]
#[command(name = "cirkit", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for training shuffles, encoder and fusion-head initialization.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for preprocessing and image loading.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// L2-normalize both query features before fusion.
    #[arg(long, global = true)]
    normalize_features: bool,
    /// Connector between multiple captions of one triplet.
    #[arg(long, global = true)]
    caption_join: Option<String>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert dataset-native annotations into a canonical manifest.
    Convert {
        #[arg(long)]
        adapter: Option<String>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write a small procedurally generated dataset with a ready config.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Caption, extract keywords, and build both unified queries.
    Preprocess,
    /// Train the fusion head (and trainable encoder weights).
    Train,
    /// Score a checkpoint under the configured protocol.
    Evaluate {
        /// Ablation mode; defaults to `eval.mode`.
        #[arg(long)]
        mode: Option<String>,
        /// Evaluate every ablation mode.
        #[arg(long, conflicts_with = "mode")]
        all_modes: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Rank the gallery for one ad-hoc query.
    Retrieve {
        /// Reference image file.
        #[arg(long)]
        reference: PathBuf,
        /// Modification text.
        #[arg(long)]
        text: String,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Prebuilt index stem (from `export-index`).
        #[arg(long)]
        index: Option<PathBuf>,
    },
    /// Encode the candidate gallery and write `<out>.f32` / `<out>.ids`.
    ExportIndex {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(&cli.global, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
