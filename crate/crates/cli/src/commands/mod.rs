pub mod anneal;
pub mod eval;
pub mod infill;
pub mod misc;
pub mod train;

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::Serialize;

use maria_core::eval::ToCsv;
use maria_core::fusion::FusionHead;
use maria_core::transformer::TransformerModel;

use crate::manifest::RunManifest;
use crate::{Ctx, Usage};

/// Checkpoint locations; each defaults to a fixed name under `--model-dir`.
#[derive(Debug, Clone, Args)]
pub struct ModelPaths {
    /// AR checkpoint [default: <model-dir>/ar.ckpt]
    #[arg(long)]
    pub ar: Option<PathBuf>,
    /// MLM checkpoint [default: <model-dir>/mlm.ckpt]
    #[arg(long)]
    pub mlm: Option<PathBuf>,
    /// Fusion head checkpoint [default: <model-dir>/head.ckpt]
    #[arg(long)]
    pub head: Option<PathBuf>,
}

impl ModelPaths {
    pub fn ar_path(&self, ctx: &Ctx) -> PathBuf {
        self.ar.clone().unwrap_or_else(|| ctx.model_dir.join("ar.ckpt"))
    }

    pub fn mlm_path(&self, ctx: &Ctx) -> PathBuf {
        self.mlm.clone().unwrap_or_else(|| ctx.model_dir.join("mlm.ckpt"))
    }

    pub fn head_path(&self, ctx: &Ctx) -> PathBuf {
        self.head.clone().unwrap_or_else(|| ctx.model_dir.join("head.ckpt"))
    }
}

/// Loads a base model, checks its attention mode and freezes it.
pub fn load_model(path: &Path, causal: bool, m: &mut RunManifest) -> anyhow::Result<TransformerModel> {
    let mut model = TransformerModel::load(path).with_context(|| format!("loading {}", path.display()))?;
    if model.is_causal() != causal {
        anyhow::bail!(
            "{} holds a {} model, expected {}",
            path.display(),
            if model.is_causal() { "causal" } else { "bidirectional" },
            if causal { "causal" } else { "bidirectional" }
        );
    }
    model.freeze();
    m.input(path)?;
    Ok(model)
}

pub fn load_head(
    path: &Path,
    ar: &TransformerModel,
    mlm: &TransformerModel,
    m: &mut RunManifest,
) -> anyhow::Result<FusionHead> {
    let head = FusionHead::load_for(path, ar, mlm).with_context(|| format!("loading {}", path.display()))?;
    m.input(path)?;
    Ok(head)
}

pub struct Models {
    pub ar: TransformerModel,
    pub mlm: TransformerModel,
    pub head: FusionHead,
}

pub fn load_all(paths: &ModelPaths, ctx: &Ctx, m: &mut RunManifest) -> anyhow::Result<Models> {
    let ar = load_model(&paths.ar_path(ctx), true, m)?;
    let mlm = load_model(&paths.mlm_path(ctx), false, m)?;
    let head = load_head(&paths.head_path(ctx), &ar, &mlm, m)?;
    Ok(Models { ar, mlm, head })
}

/// Writes `value` as pretty JSON at `out` and as CSV next to it.
pub fn write_report<T: Serialize + ToCsv + ?Sized>(out: &Path, value: &T, m: &mut RunManifest) -> anyhow::Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    std::fs::write(out, json + "\n").with_context(|| format!("writing {}", out.display()))?;
    let csv_path = out.with_extension("csv");
    let file = std::fs::File::create(&csv_path).with_context(|| format!("writing {}", csv_path.display()))?;
    value.write_csv(file)?;
    m.output(out)?;
    m.output(&csv_path)?;
    Ok(())
}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// Prints `value` as one line of JSON on stdout.
pub fn print_json<T: Serialize + ?Sized>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}
