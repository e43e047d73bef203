//! `saft`: workbench CLI wiring the pipeline end to end.
//!
//! Subcommands: gen-data, gen-bank, train, attack, eval, diagonal. Each takes
//! `--config <toml>` plus optional `--seed`, `--threads`, and `--out`
//! overrides. Artifacts land in the run directory under content-addressed
//! names; failures print one machine-readable JSON line on stderr and exit
//! nonzero.

mod artifacts;
mod commands;
mod config;
mod error;

use artifacts::RunDir;
use clap::{Args, Parser, Subcommand};
use config::RunConfig;
use error::{CliError, CliResult};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "saft", version, about = "Semantic-aware adversarial fine-tuning workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Cap worker threads (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset artifact.
    GenData(CommonArgs),
    /// Generate and filter the per-class description bank.
    GenBank(CommonArgs),
    /// Adversarially fine-tune the image encoder.
    Train(CommonArgs),
    /// Craft adversarial examples against a trained encoder.
    Attack(CommonArgs),
    /// Clean/robust zero-shot accuracy and optional retrieval recall.
    Eval(CommonArgs),
    /// Clean-vs-adversarial similarity diagonal across metrics.
    Diagonal(CommonArgs),
}

fn prepare(args: &CommonArgs) -> CliResult<(RunConfig, RunDir)> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = args.threads {
        cfg.threads = threads;
    }
    if cfg.threads > 0 {
        // Ignore the error if a global pool already exists.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global();
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| CliError::config("no output directory: set out_dir in config or pass --out"))?;
    let run = RunDir::create(&out)?;
    Ok((cfg, run))
}

fn dispatch(command: &Command) -> CliResult<()> {
    match command {
        Command::GenData(args) => {
            let (cfg, run) = prepare(args)?;
            commands::cmd_gen_data(&cfg, &run)
        }
        Command::GenBank(args) => {
            let (cfg, run) = prepare(args)?;
            commands::cmd_gen_bank(&cfg, &run)
        }
        Command::Train(args) => {
            let (cfg, run) = prepare(args)?;
            commands::cmd_train(&cfg, &run)
        }
        Command::Attack(args) => {
            let (cfg, run) = prepare(args)?;
            commands::cmd_attack(&cfg, &run)
        }
        Command::Eval(args) => {
            let (cfg, run) = prepare(args)?;
            commands::cmd_eval(&cfg, &run)
        }
        Command::Diagonal(args) => {
            let (cfg, run) = prepare(args)?;
            commands::cmd_diagonal(&cfg, &run)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(&cli.command) {
        eprintln!("{}", serde_json::to_string(&e).unwrap_or_else(|_| e.to_string()));
        std::process::exit(1);
    }
}
