//! Measurement suite: perplexities, throughput, pairwise ratings and probes.
//! Every report is versioned JSON and can also be flattened to CSV.

mod bench;
mod elo;
mod ppl;
mod probe;

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::TrainLog;

pub use bench::{
    loglog_fit, throughput_bench, BenchConfig, BenchMethod, LengthTiming, LogLogFit, MethodThroughput,
    ThroughputReport, UNSTABLE_CV,
};
pub use elo::{bradley_terry, read_records, write_records, ComparisonRecord, EloConfig, EloTable, Outcome};
pub use ppl::{
    generative_ppl, masked_ppl_ar, masked_ppl_ar_with, masked_ppl_maria, masked_ppl_maria_with,
    masked_ppl_mlm_ardecode, masked_ppl_mlm_ardecode_with, per_sample_ppl, rate_masks, rolling_ppl, sequence_nll,
    PplEntry, METHODS, MIN_SCORED_TOKENS,
};
pub use probe::{probe_features, probe_tagging, train_linear_probe, ProbeConfig, ProbeReport, ProbeSource};

pub const REPORT_VERSION: u32 = 1;

pub const DEFAULT_RATES: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub version: u32,
    pub model: String,
    pub dataset: String,
    pub seed: u64,
    pub entries: Vec<PplEntry>,
}

impl PerplexityReport {
    pub fn new(model: impl Into<String>, dataset: impl Into<String>, seed: u64) -> Self {
        PerplexityReport {
            version: REPORT_VERSION,
            model: model.into(),
            dataset: dataset.into(),
            seed,
            entries: Vec::new(),
        }
    }

    pub fn get(&self, method: &str, rate: f64) -> Option<&PplEntry> {
        self.entries.iter().find(|e| e.method == method && e.rate == rate)
    }
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Reads a report, rejecting versions newer than this build understands.
pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if let Some(v) = value.get("version").and_then(|v| v.as_u64()) {
        if v > REPORT_VERSION as u64 {
            return Err(Error::Version {
                found: v as u32,
                supported: REPORT_VERSION,
            });
        }
    }
    Ok(serde_json::from_value(value)?)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Data(format!("csv: {other:?}")),
    }
}

/// Flat CSV rendering of a report.
pub trait ToCsv {
    fn write_csv<W: Write>(&self, out: W) -> Result<()>;

    fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Data(e.to_string()))
    }
}

impl ToCsv for PerplexityReport {
    fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["model", "dataset", "method", "rate", "ppl", "nll_sum", "tokens", "insufficient"])
            .map_err(csv_err)?;
        for e in &self.entries {
            w.write_record([
                self.model.clone(),
                self.dataset.clone(),
                e.method.clone(),
                e.rate.to_string(),
                e.ppl.to_string(),
                e.nll_sum.to_string(),
                e.tokens.to_string(),
                e.insufficient.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

impl ToCsv for ThroughputReport {
    fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "method",
            "length",
            "masked",
            "mean_ms",
            "std_ms",
            "tokens_per_sec",
            "unstable",
            "slope",
            "r2",
        ])
        .map_err(csv_err)?;
        for m in &self.methods {
            let (slope, r2) = match &m.fit {
                Some(f) => (f.slope.to_string(), f.r2.to_string()),
                None => (String::new(), String::new()),
            };
            for t in &m.timings {
                w.write_record([
                    m.method.to_string(),
                    t.length.to_string(),
                    t.masked.to_string(),
                    t.mean_ms.to_string(),
                    t.std_ms.to_string(),
                    t.tokens_per_sec.to_string(),
                    t.unstable.to_string(),
                    slope.clone(),
                    r2.clone(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

impl ToCsv for EloTable {
    fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["model", "rating", "component"]).map_err(csv_err)?;
        for (name, r) in &self.ratings {
            let comp = self.components.iter().position(|c| c.contains(name)).unwrap_or(0);
            w.write_record([name.clone(), r.to_string(), comp.to_string()])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

impl ToCsv for ProbeReport {
    fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        std::slice::from_ref(self).write_csv(out)
    }
}

impl ToCsv for [ProbeReport] {
    fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["source", "accuracy", "stderr", "n_test", "num_classes"])
            .map_err(csv_err)?;
        for r in self {
            w.write_record([
                r.source.map(|s| s.to_string()).unwrap_or_default(),
                r.accuracy.to_string(),
                r.stderr.to_string(),
                r.n_test.to_string(),
                r.num_classes.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

impl ToCsv for TrainLog {
    fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "loss", "lr", "holdout", "wall_ms"]).map_err(csv_err)?;
        for r in &self.records {
            w.write_record([
                r.step.to_string(),
                opt(r.loss),
                r.lr.to_string(),
                opt(r.holdout),
                r.wall_ms.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}
