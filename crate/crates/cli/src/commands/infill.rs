use std::path::PathBuf;
use std::time::Instant;

use anyhow::Context;
use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use maria_core::data::tokenizer::{ByteTokenizer, TokenId};
use maria_core::inference::{infill_cached, infill_uncached, InfillRequest, SamplerSpec};
use maria_core::masking::{apply_mask, mask_words, sample_mask, MaskMode, MaskSet};

use super::{load_all, print_json, usage, ModelPaths};
use crate::manifest::{sibling, RunManifest};
use crate::{Ctx, Mismatch};

/// Mask draws use their own stream so `--seed` also fixes the sampler.
const MASK_SEED_SALT: u64 = 0x6d61_736b;

#[derive(Debug, Clone, Args)]
pub struct InfillArgs {
    #[command(flatten)]
    pub models: ModelPaths,
    /// Input text (UTF-8, tokenized as bytes).
    #[arg(long, conflicts_with_all = ["tokens", "request"])]
    pub text: Option<String>,
    /// Input token ids, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "request")]
    pub tokens: Option<Vec<TokenId>>,
    /// JSON request file: {"tokens": [...], "mask": [...], "sampler": {...}}.
    #[arg(long)]
    pub request: Option<PathBuf>,
    /// Mask this fraction of positions (exact count).
    #[arg(long, conflicts_with_all = ["mask_words", "mask"])]
    pub mask_rate: Option<f64>,
    /// Mask this fraction of whole words (requires text input).
    #[arg(long, conflicts_with = "mask")]
    pub mask_words: Option<f64>,
    /// Explicit masked positions, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub mask: Option<Vec<usize>>,
    /// greedy | temperature:T | nucleus:P[:T]
    #[arg(long)]
    pub sampler: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also run the uncached reference and fail (exit 3) if outputs differ.
    #[arg(long)]
    pub compare_uncached: bool,
    /// Write the JSON result here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct UncachedCheck {
    equal: bool,
    wall_ms: f64,
    /// uncached wall time over cached wall time
    speedup: f64,
}

#[derive(Debug, Serialize)]
struct InfillReport {
    input: Vec<TokenId>,
    mask: Vec<usize>,
    masked_text: String,
    text: String,
    tokens: Vec<TokenId>,
    sampler: SamplerSpec,
    ar_forwards: usize,
    ar_tokens: usize,
    mlm_forwards: usize,
    wall_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    uncached: Option<UncachedCheck>,
}

/// Tokens with their clean values where known, and the mask.
fn resolve_input(args: &InfillArgs, m: &mut RunManifest) -> anyhow::Result<(Vec<TokenId>, MaskSet, Option<SamplerSpec>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed ^ MASK_SEED_SALT);
    if let Some(path) = &args.request {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let req: InfillRequest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        m.input(path)?;
        let mask = if args.mask_rate.is_some() || args.mask.is_some() || args.mask_words.is_some() {
            flag_mask(args, &req.tokens, &mut rng)?
        } else {
            req.mask_set()?
        };
        return Ok((req.tokens, mask, Some(req.sampler)));
    }
    let tokens = match (&args.text, &args.tokens) {
        (Some(t), _) => ByteTokenizer.encode(t),
        (None, Some(ids)) => ids.clone(),
        (None, None) => return Err(usage("one of --text, --tokens or --request is required")),
    };
    let mask = flag_mask(args, &tokens, &mut rng)?;
    Ok((tokens, mask, None))
}

fn flag_mask(args: &InfillArgs, tokens: &[TokenId], rng: &mut ChaCha8Rng) -> anyhow::Result<MaskSet> {
    if let Some(rate) = args.mask_rate {
        if !(0.0..=1.0).contains(&rate) {
            return Err(usage(format!("--mask-rate must lie in [0, 1], got {rate}")));
        }
        return Ok(sample_mask(tokens.len(), rate, MaskMode::Exact, rng));
    }
    if let Some(frac) = args.mask_words {
        let text = ByteTokenizer
            .decode(tokens)
            .map_err(|_| usage("--mask-words needs input that decodes as UTF-8 text"))?;
        return Ok(mask_words(&text, frac, rng)?.1);
    }
    if let Some(idx) = &args.mask {
        return Ok(MaskSet::from_unsorted(idx.clone(), tokens.len())?);
    }
    Err(usage("one of --mask-rate, --mask-words or --mask is required"))
}

pub fn run(ctx: &Ctx, args: &InfillArgs) -> anyhow::Result<()> {
    let mut m = RunManifest::start(ctx.subcommand);
    let (input, mask, req_sampler) = resolve_input(args, &mut m)?;
    let sampler = match (&args.sampler, req_sampler) {
        (Some(s), _) => SamplerSpec::parse(s, args.seed).map_err(|e| usage(e.to_string()))?,
        (None, Some(s)) => s,
        (None, None) => SamplerSpec::greedy(),
    };
    sampler.validate().map_err(|e| usage(e.to_string()))?;
    let models = load_all(&args.models, ctx, &mut m)?;
    m.config(&serde_json::json!({
        "sampler": sampler,
        "mask": mask.indices(),
        "compare_uncached": args.compare_uncached,
    }))?;
    m.seed("seed", args.seed);

    // the masked copy is what the models see; originals at masked slots are ignored
    let masked = apply_mask(&input, &mask)?.tokens;
    let start = Instant::now();
    let out = infill_cached(&models.ar, &models.mlm, &models.head, &masked, &mask, &sampler)?;
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;

    let uncached = if args.compare_uncached {
        let start = Instant::now();
        let reference = infill_uncached(&models.ar, &models.mlm, &models.head, &masked, &mask, &sampler)?;
        let ref_ms = start.elapsed().as_secs_f64() * 1e3;
        Some(UncachedCheck {
            equal: reference.tokens == out.tokens,
            wall_ms: ref_ms,
            speedup: if wall_ms > 0.0 { ref_ms / wall_ms } else { f64::NAN },
        })
    } else {
        None
    };

    let tok = ByteTokenizer;
    let report = InfillReport {
        masked_text: tok.decode_lossy(&masked),
        text: tok.decode_lossy(&out.tokens),
        input,
        mask: mask.indices().to_vec(),
        tokens: out.tokens,
        sampler,
        ar_forwards: out.ar_forwards,
        ar_tokens: out.ar_tokens,
        mlm_forwards: out.mlm_forwards,
        wall_ms,
        uncached,
    };
    eprintln!("{}", report.text);
    print_json(&report)?;
    let manifest_fallback = match &args.out {
        Some(p) => {
            std::fs::write(p, serde_json::to_string_pretty(&report)? + "\n")
                .with_context(|| format!("writing {}", p.display()))?;
            m.output(p)?;
            sibling(p, "manifest.json")
        }
        None => PathBuf::from("infill.manifest.json"),
    };
    m.write(&ctx.manifest_path(manifest_fallback))?;
    if let Some(u) = &report.uncached {
        if !u.equal {
            return Err(Mismatch("cached and uncached infilling produced different tokens".into()).into());
        }
        eprintln!("cached == uncached, speedup {:.2}x", u.speedup);
    }
    Ok(())
}
