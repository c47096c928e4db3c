//! Command-line surface: `pretrain`, `synth`, `splits`, `train`, `eval`,
//! `introspect`. Every command resolves its configuration (CLI flags win
//! over the config file), runs under a thread pool sized by `--threads` /
//! `STCLIP_THREADS`, and writes a run manifest with content hashes of its
//! inputs next to its outputs.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "stclip",
    version,
    about = "Zero-shot spatio-temporal action detection pipeline",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct CommonArgs {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Random seed (overrides any seed in the config file).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; all artifacts land here.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (default: logical cores; env STCLIP_THREADS).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Contrastive pretraining of the image and text towers on a caption corpus.
    Pretrain(CommonArgs),
    /// Generate synthetic multi-actor videos, manifests, and captions.
    Synth(CommonArgs),
    /// Generate zero-shot label splits.
    Splits {
        /// Class count (placeholder names) or path to a JSON array of names.
        #[arg(long)]
        classes: String,
        /// Number of splits.
        #[arg(long)]
        n: usize,
        /// Test (unseen) fraction in (0, 1).
        #[arg(long)]
        frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Detection training on the seen classes of a split.
    Train(CommonArgs),
    /// Run inference and score frame-mAP@0.5 (or score an existing results file).
    Eval(CommonArgs),
    /// Emit per-layer interest tokens, importance grids, and label-feature PCA.
    Introspect(CommonArgs),
}

fn thread_count(flag: Option<usize>) -> usize {
    flag.or_else(|| {
        std::env::var("STCLIP_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    })
}

fn build_pool(threads: usize) -> stclip::Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| stclip::Error::Config(format!("cannot build thread pool: {e}")))
}

fn with_pool(args: &CommonArgs, f: fn(&CommonArgs) -> stclip::Result<()>) -> stclip::Result<()> {
    let pool = build_pool(thread_count(args.threads))?;
    pool.install(|| f(args))
}

fn run(cli: Cli) -> stclip::Result<()> {
    match cli.command {
        Command::Pretrain(args) => with_pool(&args, commands::pretrain),
        Command::Synth(args) => with_pool(&args, commands::synth),
        Command::Train(args) => with_pool(&args, commands::train),
        Command::Eval(args) => with_pool(&args, commands::eval),
        Command::Introspect(args) => with_pool(&args, commands::introspect),
        Command::Splits {
            classes,
            n,
            frac,
            seed,
            out,
            threads,
        } => {
            let pool = build_pool(thread_count(threads))?;
            pool.install(|| commands::splits(&classes, n, frac, seed, &out))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = match &err {
                stclip::Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                    "CONFIG_NOT_FOUND".to_string()
                }
                other => other.code().to_string(),
            };
            eprintln!("ERR {code}: {err}");
            ExitCode::FAILURE
        }
    }
}
