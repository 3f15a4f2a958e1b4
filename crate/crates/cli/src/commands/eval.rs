use std::path::PathBuf;

use anyhow::Context;
use clap::Args;

use maria_core::data::corpus::load_corpus;
use maria_core::data::synth;
use maria_core::eval::{
    bradley_terry, masked_ppl_ar_with, masked_ppl_maria_with, masked_ppl_mlm_ardecode_with, rate_masks,
    probe_tagging, read_records, rolling_ppl, throughput_bench, BenchMethod, PerplexityReport, ProbeReport, ProbeSource,
    METHODS,
};

use super::{load_all, load_head, load_model, print_json, usage, write_report, ModelPaths};
use crate::manifest::{sibling, RunManifest};
use crate::Ctx;

#[derive(Debug, Clone, Args)]
pub struct PplArgs {
    #[command(flatten)]
    pub models: ModelPaths,
    /// Corpus text files; holdout windows are scored.
    #[arg(long, required = true, num_args = 1..)]
    pub corpus: Vec<PathBuf>,
    /// Mask rates, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub rates: Option<Vec<f64>>,
    /// Any of maria, ar, mlm_ardecode, rolling.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Holdout windows to score.
    #[arg(long)]
    pub windows: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "ppl.json")]
    pub out: PathBuf,
}

pub fn ppl(ctx: &Ctx, args: &PplArgs) -> anyhow::Result<()> {
    let mut cfg = ctx.file.eval.clone();
    if let Some(r) = &args.rates {
        cfg.rates = r.clone();
    }
    if let Some(v) = args.windows {
        cfg.windows = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(r) = cfg.rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(usage(format!("mask rate {r} outside [0, 1]")));
    }
    let methods: Vec<String> = match &args.methods {
        Some(ms) => ms.iter().map(|s| s.trim().to_string()).collect(),
        None => METHODS.iter().map(|s| s.to_string()).collect(),
    };
    if let Some(bad) = methods.iter().find(|m| !METHODS.contains(&m.as_str()) && m.as_str() != "rolling") {
        return Err(usage(format!(
            "unknown method {bad:?}; expected one of {}, rolling",
            METHODS.join(", ")
        )));
    }
    let wants = |name: &str| methods.iter().any(|m| m == name);
    let need_ar = wants("maria") || wants("ar") || wants("rolling");
    let need_mlm = wants("maria") || wants("mlm_ardecode");

    let mut m = RunManifest::start(ctx.subcommand);
    let ar = need_ar.then(|| load_model(&args.models.ar_path(ctx), true, &mut m)).transpose()?;
    let mlm = need_mlm.then(|| load_model(&args.models.mlm_path(ctx), false, &mut m)).transpose()?;
    let head = match (&ar, &mlm, wants("maria")) {
        (Some(a), Some(b), true) => Some(load_head(&args.models.head_path(ctx), a, b, &mut m)?),
        _ => None,
    };
    let window = [ar.as_ref(), mlm.as_ref()]
        .into_iter()
        .flatten()
        .map(|x| x.max_seq_len())
        .min()
        .ok_or_else(|| usage("no methods selected"))?;
    let rolling_window = if cfg.rolling_window == 0 { window } else { cfg.rolling_window };
    m.config(&serde_json::json!({
        "eval": cfg,
        "methods": methods,
        "window_len": window,
        "corpus": ctx.file.corpus,
    }))?;
    m.seed("masks", cfg.seed);

    let corpus = load_corpus(&args.corpus, window, ctx.file.corpus.holdout_frac, ctx.file.corpus.split_seed)
        .context("reading corpus")?;
    for p in &args.corpus {
        m.input(p)?;
    }
    let windows = &corpus.holdout[..cfg.windows.min(corpus.holdout.len())];
    if windows.is_empty() {
        anyhow::bail!("corpus has no holdout windows of {window} tokens");
    }

    let name = |p: PathBuf| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let dataset: Vec<String> = args.corpus.iter().cloned().map(name).collect();
    let mut report = PerplexityReport::new(name(args.models.ar_path(ctx)), dataset.join("+"), cfg.seed);
    for &rate in &cfg.rates {
        let masks = rate_masks(windows, rate, cfg.seed)?;
        for method in &methods {
            let entry = match method.as_str() {
                "maria" => masked_ppl_maria_with(
                    ar.as_ref().unwrap(),
                    mlm.as_ref().unwrap(),
                    head.as_ref().unwrap(),
                    windows,
                    &masks,
                    rate,
                )?,
                "ar" => masked_ppl_ar_with(ar.as_ref().unwrap(), windows, &masks, rate)?,
                "mlm_ardecode" => masked_ppl_mlm_ardecode_with(mlm.as_ref().unwrap(), windows, &masks, rate)?,
                _ => continue,
            };
            eprintln!("{:>13} rate {rate:.2}: ppl {:.4} over {} tokens", entry.method, entry.ppl, entry.tokens);
            report.entries.push(entry);
        }
    }
    if wants("rolling") {
        let stream: Vec<_> = windows.iter().flat_map(|w| w.tokens.iter().copied()).collect();
        let entry = rolling_ppl(ar.as_ref().unwrap(), &stream, rolling_window)?;
        eprintln!("      rolling window {rolling_window}: ppl {:.4}", entry.ppl);
        report.entries.push(entry);
    }
    write_report(&args.out, &report, &mut m)?;
    m.write(&ctx.manifest_path(sibling(&args.out, "manifest.json")))
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub models: ModelPaths,
    /// Sequence lengths, comma separated and increasing.
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
    #[arg(long)]
    pub mask_rate: Option<f64>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub warmups: Option<usize>,
    /// Any of maria_cached, maria_uncached, mlm_ardecode.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "bench.json")]
    pub out: PathBuf,
}

pub fn bench(ctx: &Ctx, args: &BenchArgs) -> anyhow::Result<()> {
    let mut cfg = ctx.file.bench.clone();
    if let Some(v) = &args.lengths {
        cfg.lengths = v.clone();
    }
    if let Some(v) = args.mask_rate {
        cfg.mask_rate = v;
    }
    if let Some(v) = args.runs {
        cfg.runs = v;
    }
    if let Some(v) = args.warmups {
        cfg.warmups = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    let methods: Vec<BenchMethod> = match &args.methods {
        Some(ms) => ms
            .iter()
            .map(|s| s.trim().parse().map_err(|e: maria_core::Error| usage(e.to_string())))
            .collect::<anyhow::Result<_>>()?,
        None => BenchMethod::ALL.to_vec(),
    };

    let mut m = RunManifest::start(ctx.subcommand);
    let models = load_all(&args.models, ctx, &mut m)?;
    m.config(&serde_json::json!({ "bench": cfg, "methods": methods.iter().map(|x| x.name()).collect::<Vec<_>>() }))?;
    m.seed("bench", cfg.seed);
    let report = throughput_bench(&models.ar, &models.mlm, &models.head, &methods, &cfg)?;
    for mt in &report.methods {
        match &mt.fit {
            Some(f) => eprintln!("{:>15}: slope {:.3}, R2 {:.4}", mt.method, f.slope, f.r2),
            None => eprintln!("{:>15}: no fit", mt.method),
        }
    }
    write_report(&args.out, &report, &mut m)?;
    m.write(&ctx.manifest_path(sibling(&args.out, "manifest.json")))
}

#[derive(Debug, Clone, Args)]
pub struct EloArgs {
    /// Comparison records (JSON lines: {"item", "a", "b", "outcome"}).
    pub records: PathBuf,
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub base: Option<f64>,
    #[arg(long)]
    pub init: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long, default_value = "elo.json")]
    pub out: PathBuf,
}

pub fn elo(ctx: &Ctx, args: &EloArgs) -> anyhow::Result<()> {
    let mut cfg = ctx.file.elo;
    cfg.scale = args.scale.unwrap_or(cfg.scale);
    cfg.base = args.base.unwrap_or(cfg.base);
    cfg.init = args.init.unwrap_or(cfg.init);
    cfg.l2 = args.l2.unwrap_or(cfg.l2);
    let mut m = RunManifest::start(ctx.subcommand);
    m.config(&cfg)?;
    let records = read_records(&args.records).with_context(|| format!("reading {}", args.records.display()))?;
    m.input(&args.records)?;
    let table = bradley_terry(&records, &cfg)?;
    if !table.connected {
        log::warn!("comparison graph has {} components; ratings are only comparable within one", table.components.len());
    }
    print_json(&table.ratings)?;
    write_report(&args.out, &table, &mut m)?;
    m.write(&ctx.manifest_path(sibling(&args.out, "manifest.json")))
}

#[derive(Debug, Clone, Args)]
pub struct ProbeArgs {
    /// AR checkpoint [default: <model-dir>/ar.ckpt]
    #[arg(long)]
    pub ar: Option<PathBuf>,
    /// MLM checkpoint [default: <model-dir>/mlm.ckpt]
    #[arg(long)]
    pub mlm: Option<PathBuf>,
    /// Any of mlm_only, ar_only, concat.
    #[arg(long, value_delimiter = ',', default_value = "mlm_only,ar_only,concat")]
    pub sources: Vec<String>,
    /// Synthetic tagged sequences to generate.
    #[arg(long, default_value_t = 200)]
    pub sequences: usize,
    /// Bytes per sequence [default: AR max_seq_len - 1]
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Seed for the synthetic tagging data.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "probe.json")]
    pub out: PathBuf,
}

pub fn probe(ctx: &Ctx, args: &ProbeArgs) -> anyhow::Result<()> {
    let mut cfg = ctx.file.probe;
    cfg.epochs = args.epochs.unwrap_or(cfg.epochs);
    cfg.lr = args.lr.unwrap_or(cfg.lr);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    let sources: Vec<ProbeSource> = args
        .sources
        .iter()
        .map(|s| s.trim().parse().map_err(|e: maria_core::Error| usage(e.to_string())))
        .collect::<anyhow::Result<_>>()?;

    let mut m = RunManifest::start(ctx.subcommand);
    let ar = load_model(&args.ar.clone().unwrap_or_else(|| ctx.model_dir.join("ar.ckpt")), true, &mut m)?;
    let mlm = load_model(&args.mlm.clone().unwrap_or_else(|| ctx.model_dir.join("mlm.ckpt")), false, &mut m)?;
    let limit = (ar.max_seq_len() - 1).min(mlm.max_seq_len());
    let seq_len = args.seq_len.unwrap_or(limit);
    if seq_len == 0 || seq_len > limit {
        return Err(usage(format!("--seq-len must lie in 1..={limit}")));
    }
    m.config(&serde_json::json!({
        "probe": cfg,
        "sources": sources,
        "sequences": args.sequences,
        "seq_len": seq_len,
    }))?;
    m.seed("probe", cfg.seed);
    m.seed("data", args.data_seed);

    let data = synth::tagged_sequences(args.sequences, seq_len, args.data_seed);
    let mut reports: Vec<ProbeReport> = Vec::new();
    for &source in &sources {
        let r = probe_tagging(source, &ar, &mlm, &data, &cfg)?;
        eprintln!("{:>9}: accuracy {:.4} +/- {:.4}", source, r.accuracy, r.stderr);
        reports.push(r);
    }
    write_report(&args.out, reports.as_slice(), &mut m)?;
    m.write(&ctx.manifest_path(sibling(&args.out, "manifest.json")))
}
