use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, ValueEnum};

use maria_core::data::synth;
use maria_core::eval::ToCsv;
use maria_core::training::TrainLog;

use crate::manifest::{sibling, RunManifest};
use crate::Ctx;

#[derive(Debug, Clone, Args)]
pub struct GenCorpusArgs {
    /// Minimum size in bytes.
    #[arg(long, default_value_t = 1_000_000)]
    pub bytes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn gen_corpus(ctx: &Ctx, args: &GenCorpusArgs) -> anyhow::Result<()> {
    let mut m = RunManifest::start(ctx.subcommand);
    m.config(&serde_json::json!({ "bytes": args.bytes }))?;
    m.seed("synth", args.seed);
    let text = synth::generate_text(args.bytes, args.seed);
    std::fs::write(&args.out, &text).with_context(|| format!("writing {}", args.out.display()))?;
    m.output(&args.out)?;
    eprintln!("wrote {} bytes to {}", text.len(), args.out.display());
    m.write(&ctx.manifest_path(sibling(&args.out, "manifest.json")))
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LogFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, Args)]
pub struct PlotLogArgs {
    /// Training log written by a train-* subcommand.
    pub log: PathBuf,
    /// Output path [default: the log path with a .csv or .json extension]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: LogFormat,
}

pub fn plot_log(ctx: &Ctx, args: &PlotLogArgs) -> anyhow::Result<()> {
    let mut m = RunManifest::start(ctx.subcommand);
    let log = TrainLog::read_jsonl(&args.log).with_context(|| format!("reading {}", args.log.display()))?;
    m.input(&args.log)?;
    let ext = match args.format {
        LogFormat::Csv => "csv",
        LogFormat::Json => "json",
    };
    let out = args.out.clone().unwrap_or_else(|| args.log.with_extension(ext));
    match args.format {
        LogFormat::Csv => {
            let f = std::fs::File::create(&out).with_context(|| format!("writing {}", out.display()))?;
            log.write_csv(f)?;
        }
        LogFormat::Json => {
            std::fs::write(&out, serde_json::to_string_pretty(&log.records)? + "\n")
                .with_context(|| format!("writing {}", out.display()))?;
        }
    }
    m.output(&out)?;
    m.config(&serde_json::json!({ "format": ext }))?;
    m.write(&ctx.manifest_path(sibling(&out, "manifest.json")))
}
