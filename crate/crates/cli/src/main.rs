//! Command-line front end: runs experiment grids and inspects, merges,
//! or rank-analyzes the artifacts they produce.
//!
//! Exit codes: 0 success, 2 configuration or structural errors, 3 numeric
//! failures (non-finite losses, violated rank bounds), 4 file errors.

use clap::{Args, Parser, Subcommand};
use hyperlab_core::error::{Error, Result};
use hyperlab_core::harness;
use hyperlab_core::io::{write_file, WeightStore};
use hyperlab_core::rank::{analyze_weight_stores, RANK_ABS_THRESHOLD};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "hyperlab",
    about = "Trains and compares weight-space adapters on synthetic tasks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment grid from a JSON config.
    Run(RunArgs),
    /// Summarize the trainable parameters stored in a checkpoint.
    Inspect {
        /// Path to a checkpoint.json written by `run`.
        checkpoint: PathBuf,
    },
    /// Fold a checkpoint into its base weights, writing dense weights.
    Merge(MergeArgs),
    /// Compare two weight directories and report update ranks.
    Rank(RankArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides output_dir from the config.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Comma-separated seeds; overrides seeds from the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Worker threads for grid cells; HYPERLAB_THREADS is the fallback,
    /// then all cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Skip the rank.svg plots.
    #[arg(long)]
    no_svg: bool,
}

#[derive(Args)]
struct MergeArgs {
    /// Checkpoint to fold in.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory holding the base weights the checkpoint trained from.
    #[arg(long)]
    base: PathBuf,
    /// Destination directory for the merged weights.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct RankArgs {
    /// Weight directory before adaptation.
    #[arg(long)]
    before: PathBuf,
    /// Weight directory after adaptation.
    #[arg(long)]
    after: PathBuf,
    /// Absolute singular-value threshold for counting update directions.
    #[arg(long, default_value_t = RANK_ABS_THRESHOLD)]
    threshold: f64,
    /// Write rank.json, rank.csv, and rank.svg here instead of printing
    /// the table to stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let mut cfg = harness::load_config(&args.config)?;
            if let Some(seeds) = args.seeds {
                cfg.seeds = seeds;
            }
            if args.no_svg {
                cfg.analysis.emit_svg = false;
            }
            let out = args.output.or_else(|| cfg.output_dir.clone()).ok_or_else(|| {
                Error::Config(
                    "no output directory: set output_dir in the config or pass --output".into(),
                )
            })?;
            let summary = harness::run(&cfg, &out, resolve_threads(args.threads)?)?;
            print!("{}", summary.csv);
            Ok(())
        }
        Command::Inspect { checkpoint } => {
            print!("{}", harness::inspect(&checkpoint)?);
            Ok(())
        }
        Command::Merge(args) => harness::merge(&args.checkpoint, &args.base, &args.output),
        Command::Rank(args) => {
            let before = WeightStore::load(&args.before)?;
            let after = WeightStore::load(&args.after)?;
            let report = analyze_weight_stores(&before, &after, args.threshold)?;
            match args.output {
                Some(dir) => {
                    write_file(&dir.join("rank.json"), report.to_json().as_bytes())?;
                    write_file(&dir.join("rank.csv"), report.to_csv().as_bytes())?;
                    write_file(&dir.join("rank.svg"), report.to_svg().as_bytes())?;
                }
                None => print!("{}", report.to_csv()),
            }
            Ok(())
        }
    }
}

fn resolve_threads(flag: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("HYPERLAB_THREADS") {
        Ok(raw) => raw.trim().parse::<usize>().map(Some).map_err(|_| {
            Error::Config(format!("HYPERLAB_THREADS must be an integer, got '{raw}'"))
        }),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Config(format!("HYPERLAB_THREADS: {e}"))),
    }
}
