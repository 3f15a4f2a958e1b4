use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, ValueEnum};
use serde::Serialize;

use maria_core::data::corpus::{load_corpus, CorpusShards};
use maria_core::fusion::FusionInit;
use maria_core::masking::{MaskMode, MaskRateSpec};
use maria_core::training::{self, TrainConfig};
use maria_core::transformer::{AttentionMode, ModelConfig, TransformerModel};

use super::load_model;
use crate::config::CorpusConfig;
use crate::manifest::{sibling, RunManifest};
use crate::Ctx;

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MaskModeArg {
    Exact,
    Bernoulli,
}

impl From<MaskModeArg> for MaskMode {
    fn from(m: MaskModeArg) -> Self {
        match m {
            MaskModeArg::Exact => MaskMode::Exact,
            MaskModeArg::Bernoulli => MaskMode::Bernoulli,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InitArg {
    Product,
    Random,
}

/// Optimization flags shared by all training subcommands.
#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    /// Corpus text files.
    #[arg(long, required = true, num_args = 1..)]
    pub corpus: Vec<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training log (JSON lines) [default: <out>.log.jsonl]
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub micro_batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub holdout_size: Option<usize>,
    #[arg(long)]
    pub holdout_frac: Option<f64>,
    /// Fixed mask rate instead of the configured Beta distribution.
    #[arg(long)]
    pub mask_rate: Option<f64>,
    #[arg(long, value_enum)]
    pub mask_mode: Option<MaskModeArg>,
}

impl TrainFlags {
    fn apply(&self, mut cfg: TrainConfig) -> TrainConfig {
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
            if self.micro_batch.is_none() && cfg.micro_batch > v {
                cfg.micro_batch = v;
            }
        }
        if let Some(v) = self.micro_batch {
            cfg.micro_batch = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.eval_every {
            cfg.eval_every = v;
        }
        if let Some(v) = self.holdout_size {
            cfg.holdout_size = v;
        }
        if let Some(v) = self.mask_rate {
            cfg.mask_rate = MaskRateSpec::fixed(v);
        }
        if let Some(v) = self.mask_mode {
            cfg.mask_mode = v.into();
        }
        cfg
    }

    fn corpus_config(&self, mut c: CorpusConfig) -> CorpusConfig {
        if let Some(v) = self.holdout_frac {
            c.holdout_frac = v;
        }
        c
    }
}

#[derive(Debug, Clone, Args)]
pub struct ShapeFlags {
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub ffn_mult: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct BaseArgs {
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub shape: ShapeFlags,
}

#[derive(Debug, Clone, Args)]
pub struct FusionArgs {
    #[command(flatten)]
    pub train: TrainFlags,
    /// AR checkpoint [default: <model-dir>/ar.ckpt]
    #[arg(long)]
    pub ar: Option<PathBuf>,
    /// MLM checkpoint [default: <model-dir>/mlm.ckpt]
    #[arg(long)]
    pub mlm: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "product")]
    pub init: InitArg,
    /// Add a zero-initialized output bias to the head.
    #[arg(long)]
    pub bias: bool,
}

#[derive(Serialize)]
struct ResolvedBase<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    corpus: &'a CorpusConfig,
}

#[derive(Serialize)]
struct ResolvedFusion<'a> {
    init: &'a str,
    bias: bool,
    window_len: usize,
    train: &'a TrainConfig,
    corpus: &'a CorpusConfig,
}

fn read_corpus(flags: &TrainFlags, window: usize, c: &CorpusConfig, m: &mut RunManifest) -> anyhow::Result<CorpusShards> {
    for p in &flags.corpus {
        if !p.exists() {
            anyhow::bail!("corpus file {} does not exist", p.display());
        }
    }
    let corpus = load_corpus(&flags.corpus, window, c.holdout_frac, c.split_seed).context("reading corpus")?;
    for p in &flags.corpus {
        m.input(p)?;
    }
    log::info!(
        "corpus: {} train / {} holdout windows of {window} tokens",
        corpus.train.len(),
        corpus.holdout.len()
    );
    Ok(corpus)
}

pub fn train_base(ctx: &Ctx, args: &BaseArgs, attention: AttentionMode) -> anyhow::Result<()> {
    let mut shape = ctx.file.model.clone();
    let s = &args.shape;
    shape.d_model = s.d_model.unwrap_or(shape.d_model);
    shape.n_layers = s.layers.unwrap_or(shape.n_layers);
    shape.n_heads = s.heads.unwrap_or(shape.n_heads);
    shape.max_seq_len = s.seq_len.unwrap_or(shape.max_seq_len);
    shape.ffn_mult = s.ffn_mult.unwrap_or(shape.ffn_mult);
    let model_cfg = shape.to_config(attention);
    model_cfg.validate()?;
    let train_cfg = args.train.apply(ctx.file.train.clone());
    train_cfg.validate()?;
    let corpus_cfg = args.train.corpus_config(ctx.file.corpus.clone());

    let default_name = if model_cfg.is_causal() { "ar.ckpt" } else { "mlm.ckpt" };
    let out = args.train.out.clone().unwrap_or_else(|| ctx.model_dir.join(default_name));
    let log_path = args.train.log.clone().unwrap_or_else(|| sibling(&out, "log.jsonl"));

    let mut m = RunManifest::start(ctx.subcommand);
    m.config(&ResolvedBase {
        model: &model_cfg,
        train: &train_cfg,
        corpus: &corpus_cfg,
    })?;
    m.seed("train", train_cfg.seed);
    m.seed("split", corpus_cfg.split_seed);
    let corpus = read_corpus(&args.train, model_cfg.max_seq_len, &corpus_cfg, &mut m)?;

    let mut model = TransformerModel::new(model_cfg, train_cfg.seed)?;
    log::info!("{} parameters", model.num_params());
    let log = training::train_model(&mut model, &corpus, &train_cfg)?;
    model.save(&out).with_context(|| format!("writing {}", out.display()))?;
    log.write_jsonl(&log_path)?;
    m.output(&out)?;
    m.output(&log_path)?;
    eprintln!(
        "wrote {} (holdout {} -> {})",
        out.display(),
        fmt_loss(log.initial_holdout()),
        fmt_loss(log.final_holdout())
    );
    m.write(&ctx.manifest_path(sibling(&out, "manifest.json")))
}

pub fn train_fusion(ctx: &Ctx, args: &FusionArgs) -> anyhow::Result<()> {
    let train_cfg = args.train.apply(ctx.file.fusion.clone());
    train_cfg.validate()?;
    let corpus_cfg = args.train.corpus_config(ctx.file.corpus.clone());
    let out = args.train.out.clone().unwrap_or_else(|| ctx.model_dir.join("head.ckpt"));
    let log_path = args.train.log.clone().unwrap_or_else(|| sibling(&out, "log.jsonl"));
    let (init, init_name) = match args.init {
        InitArg::Product => (FusionInit::Product, "product"),
        InitArg::Random => (FusionInit::Random, "random"),
    };

    let mut m = RunManifest::start(ctx.subcommand);
    let ar_path = args.ar.clone().unwrap_or_else(|| ctx.model_dir.join("ar.ckpt"));
    let mlm_path = args.mlm.clone().unwrap_or_else(|| ctx.model_dir.join("mlm.ckpt"));
    let ar = load_model(&ar_path, true, &mut m)?;
    let mlm = load_model(&mlm_path, false, &mut m)?;
    let window = ar.max_seq_len().min(mlm.max_seq_len());
    m.config(&ResolvedFusion {
        init: init_name,
        bias: args.bias,
        window_len: window,
        train: &train_cfg,
        corpus: &corpus_cfg,
    })?;
    m.seed("train", train_cfg.seed);
    m.seed("split", corpus_cfg.split_seed);
    let corpus = read_corpus(&args.train, window, &corpus_cfg, &mut m)?;

    let mut head = maria_core::fusion::FusionHead::new(init, &ar, &mlm, train_cfg.seed)?;
    if args.bias {
        head = head.with_bias();
    }
    let (head, log) = training::train_head(head, &ar, &mlm, &corpus, &train_cfg)?;
    head.save(&out).with_context(|| format!("writing {}", out.display()))?;
    log.write_jsonl(&log_path)?;
    m.output(&out)?;
    m.output(&log_path)?;
    eprintln!(
        "wrote {} ({init_name} init, holdout {} -> {})",
        out.display(),
        fmt_loss(log.initial_holdout()),
        fmt_loss(log.final_holdout())
    );
    m.write(&ctx.manifest_path(sibling(&out, "manifest.json")))
}

fn fmt_loss(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}
