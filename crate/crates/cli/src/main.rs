//! `maria` command-line driver.
//!
//! Exit codes:
//!
//! - 0: success
//! - 1: runtime failure (I/O, bad checkpoint, model error)
//! - 2: usage or configuration error, including unknown method names
//! - 3: `infill --compare-uncached` found the cached and uncached outputs differ

mod commands;
mod config;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

use commands::{anneal, eval, infill, misc, train};

#[derive(Debug, Parser)]
#[command(name = "maria", version, about = "Masked infilling with fused causal and bidirectional models")]
struct Cli {
    /// Directory holding ar.ckpt, mlm.ckpt and head.ckpt when paths are not given.
    #[arg(long, global = true, env = "MARIA_MODEL_DIR", default_value = ".")]
    model_dir: PathBuf,

    /// TOML config file; command-line flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run manifest path (default depends on the subcommand).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,

    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a causal (AR) model.
    TrainAr(train::BaseArgs),
    /// Train a bidirectional masked (MLM) model.
    TrainMlm(train::BaseArgs),
    /// Train the fusion head over frozen AR and MLM checkpoints.
    TrainFusion(train::FusionArgs),
    /// Fill masked positions of one sequence.
    Infill(infill::InfillArgs),
    /// Unconditional sampling refined by remask-and-infill annealing.
    SampleAnneal(anneal::AnnealArgs),
    /// Masked perplexity at several mask rates.
    EvalPpl(eval::PplArgs),
    /// Infilling throughput versus sequence length.
    Bench(eval::BenchArgs),
    /// Bradley-Terry ratings from pairwise comparison records.
    Elo(eval::EloArgs),
    /// Linear probes on frozen hidden states for synthetic tagging.
    Probe(eval::ProbeArgs),
    /// Write synthetic English-like text for smoke runs.
    GenCorpus(misc::GenCorpusArgs),
    /// Convert a training log to CSV or JSON for plotting.
    PlotLog(misc::PlotLogArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::TrainAr(_) => "train-ar",
            Command::TrainMlm(_) => "train-mlm",
            Command::TrainFusion(_) => "train-fusion",
            Command::Infill(_) => "infill",
            Command::SampleAnneal(_) => "sample-anneal",
            Command::EvalPpl(_) => "eval-ppl",
            Command::Bench(_) => "bench",
            Command::Elo(_) => "elo",
            Command::Probe(_) => "probe",
            Command::GenCorpus(_) => "gen-corpus",
            Command::PlotLog(_) => "plot-log",
        }
    }
}

/// Bad flags or config values; exits with code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Cached and uncached infilling disagreed; exits with code 3.
#[derive(Debug)]
pub struct Mismatch(pub String);

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Mismatch {}

/// Shared state every subcommand receives.
pub struct Ctx {
    pub model_dir: PathBuf,
    pub file: config::FileConfig,
    pub config_path: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub subcommand: &'static str,
}

impl Ctx {
    /// Explicit `--manifest`, else `fallback`.
    pub fn manifest_path(&self, fallback: PathBuf) -> PathBuf {
        self.manifest.clone().unwrap_or(fallback)
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Mismatch>().is_some() {
        3
    } else if err.downcast_ref::<Usage>().is_some()
        || err.downcast_ref::<toml::de::Error>().is_some()
        || matches!(err.downcast_ref::<maria_core::Error>(), Some(maria_core::Error::Config { .. }))
    {
        2
    } else {
        1
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = config::load(cli.config.as_deref())?;
    let ctx = Ctx {
        model_dir: cli.model_dir,
        file,
        config_path: cli.config,
        manifest: cli.manifest,
        subcommand: cli.command.name(),
    };
    match cli.command {
        Command::TrainAr(a) => train::train_base(&ctx, &a, maria_core::transformer::AttentionMode::Causal),
        Command::TrainMlm(a) => train::train_base(&ctx, &a, maria_core::transformer::AttentionMode::Bidirectional),
        Command::TrainFusion(a) => train::train_fusion(&ctx, &a),
        Command::Infill(a) => infill::run(&ctx, &a),
        Command::SampleAnneal(a) => anneal::run(&ctx, &a),
        Command::EvalPpl(a) => eval::ppl(&ctx, &a),
        Command::Bench(a) => eval::bench(&ctx, &a),
        Command::Elo(a) => eval::elo(&ctx, &a),
        Command::Probe(a) => eval::probe(&ctx, &a),
        Command::GenCorpus(a) => misc::gen_corpus(&ctx, &a),
        Command::PlotLog(a) => misc::plot_log(&ctx, &a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
