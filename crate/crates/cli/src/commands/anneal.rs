use std::io::Write;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use serde::Serialize;

use maria_core::data::tokenizer::{ByteTokenizer, TokenId};
use maria_core::eval::per_sample_ppl;
use maria_core::inference::simulated_anneal;

use super::{load_all, load_model, print_json, ModelPaths};
use crate::manifest::{sibling, RunManifest};
use crate::Ctx;

#[derive(Debug, Clone, Args)]
pub struct AnnealArgs {
    #[command(flatten)]
    pub models: ModelPaths,
    /// Sequence length to generate.
    #[arg(long, default_value_t = 64)]
    pub length: usize,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Fraction of positions remasked per iteration.
    #[arg(long)]
    pub remask: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Trace output (JSON lines, one per iteration including the initial sample).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Causal checkpoint used to score each iteration's sample.
    #[arg(long)]
    pub scorer: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct TraceLine {
    iteration: usize,
    /// absent for the initial AR sample
    temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ppl: Option<f64>,
    text: String,
    tokens: Vec<TokenId>,
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    text: String,
    tokens: &'a [TokenId],
    iterations: usize,
    ppl: Option<Vec<f64>>,
}

pub fn run(ctx: &Ctx, args: &AnnealArgs) -> anyhow::Result<()> {
    let mut schedule = ctx.file.anneal;
    if let Some(v) = args.iterations {
        schedule.iterations = v;
    }
    if let Some(v) = args.remask {
        schedule.remask_fraction = v;
    }
    if let Some(v) = args.seed {
        schedule.seed = v;
    }
    schedule.validate()?;

    let mut m = RunManifest::start(ctx.subcommand);
    let models = load_all(&args.models, ctx, &mut m)?;
    let scorer = args.scorer.as_ref().map(|p| load_model(p, true, &mut m)).transpose()?;
    m.config(&serde_json::json!({ "length": args.length, "schedule": schedule }))?;
    m.seed("anneal", schedule.seed);

    let result = simulated_anneal(&models.ar, &models.mlm, &models.head, args.length, &schedule)?;
    let ppl = scorer.as_ref().map(|s| per_sample_ppl(s, &result.trace)).transpose()?;

    let tok = ByteTokenizer;
    let trace_path = args.trace.clone().unwrap_or_else(|| PathBuf::from("anneal.trace.jsonl"));
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(&trace_path).with_context(|| format!("writing {}", trace_path.display()))?,
    );
    for (k, seq) in result.trace.iter().enumerate() {
        let line = TraceLine {
            iteration: k,
            temperature: k.checked_sub(1).map(|i| result.temperatures[i]),
            ppl: ppl.as_ref().map(|p| p[k]),
            text: tok.decode_lossy(seq),
            tokens: seq.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&line)?)?;
    }
    w.flush()?;
    drop(w);
    m.output(&trace_path)?;

    eprintln!("{}", tok.decode_lossy(&result.tokens));
    print_json(&Summary {
        text: tok.decode_lossy(&result.tokens),
        tokens: &result.tokens,
        iterations: schedule.iterations,
        ppl,
    })?;
    m.write(&ctx.manifest_path(sibling(&trace_path, "manifest.json")))
}
