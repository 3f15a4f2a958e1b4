//! Wall-clock throughput of the infilling procedures across sequence lengths.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::tokenizer::{TokenId, MASK};
use crate::error::{Error, Result};
use crate::fusion::FusionHead;
use crate::inference::{infill_cached, infill_uncached, mlm_iterative_decode, SamplerSpec};
use crate::masking::{sample_mask, MaskMode};
use crate::transformer::TransformerModel;

use super::REPORT_VERSION;

/// Coefficient of variation above which a timing is flagged.
pub const UNSTABLE_CV: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMethod {
    MariaCached,
    MariaUncached,
    MlmArdecode,
}

impl BenchMethod {
    pub const ALL: [BenchMethod; 3] = [BenchMethod::MariaCached, BenchMethod::MariaUncached, BenchMethod::MlmArdecode];

    pub fn name(self) -> &'static str {
        match self {
            BenchMethod::MariaCached => "maria_cached",
            BenchMethod::MariaUncached => "maria_uncached",
            BenchMethod::MlmArdecode => "mlm_ardecode",
        }
    }
}

impl fmt::Display for BenchMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("methods", format!("unknown bench method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub mask_rate: f64,
    pub runs: usize,
    pub warmups: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            lengths: vec![64, 128, 256],
            mask_rate: 0.5,
            runs: 10,
            warmups: 2,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lengths.is_empty() || self.lengths[0] == 0 || self.lengths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("lengths", "must be nonempty, positive and strictly increasing"));
        }
        if self.runs == 0 {
            return Err(Error::config("runs", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::config("mask_rate", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthTiming {
    pub length: usize,
    pub masked: usize,
    pub wall_ms: Vec<f64>,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub tokens_per_sec: f64,
    pub unstable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodThroughput {
    pub method: BenchMethod,
    pub timings: Vec<LengthTiming>,
    /// Least-squares fit of ln(mean time) against ln(length); absent when a
    /// mean time is zero or fewer than two lengths were run.
    pub fit: Option<LogLogFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub version: u32,
    pub config: BenchConfig,
    pub methods: Vec<MethodThroughput>,
}

impl ThroughputReport {
    pub fn method(&self, m: BenchMethod) -> Option<&MethodThroughput> {
        self.methods.iter().find(|r| r.method == m)
    }
}

pub fn loglog_fit(xs: &[f64], ys: &[f64]) -> Option<LogLogFit> {
    if xs.len() != ys.len() || xs.len() < 2 || xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some(LogLogFit { slope, intercept, r2 })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Times each method on one random byte sequence per length, masked at
/// `mask_rate` with an exact count. Decoding is greedy.
pub fn throughput_bench(
    ar: &TransformerModel,
    mlm: &TransformerModel,
    head: &FusionHead,
    methods: &[BenchMethod],
    cfg: &BenchConfig,
) -> Result<ThroughputReport> {
    cfg.validate()?;
    head.check_compatible(ar, mlm)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cases: Vec<_> = cfg
        .lengths
        .iter()
        .map(|&n| {
            let mut toks: Vec<TokenId> = (0..n).map(|_| rng.random_range(0..256)).collect();
            let mask = sample_mask(n, cfg.mask_rate, MaskMode::Exact, &mut rng);
            for &i in mask.indices() {
                toks[i] = MASK;
            }
            (toks, mask)
        })
        .collect();
    let greedy = SamplerSpec::greedy();
    let mut out = Vec::new();
    for &method in methods {
        let mut timings = Vec::new();
        for (toks, mask) in &cases {
            let run = || -> Result<()> {
                match method {
                    BenchMethod::MariaCached => infill_cached(ar, mlm, head, toks, mask, &greedy).map(drop),
                    BenchMethod::MariaUncached => infill_uncached(ar, mlm, head, toks, mask, &greedy).map(drop),
                    BenchMethod::MlmArdecode => mlm_iterative_decode(mlm, toks, mask, &greedy).map(drop),
                }
            };
            for _ in 0..cfg.warmups {
                run()?;
            }
            let mut wall_ms = Vec::with_capacity(cfg.runs);
            for _ in 0..cfg.runs {
                let t = Instant::now();
                run()?;
                wall_ms.push(t.elapsed().as_secs_f64() * 1e3);
            }
            let (mean_ms, std_ms) = mean_std(&wall_ms);
            let tokens_per_sec = if mean_ms > 0.0 {
                mask.len() as f64 / (mean_ms / 1e3)
            } else {
                0.0
            };
            let unstable = mean_ms > 0.0 && std_ms / mean_ms > UNSTABLE_CV;
            if unstable {
                log::warn!("{method} at length {}: timing spread {std_ms:.3} ms on mean {mean_ms:.3} ms", toks.len());
            }
            timings.push(LengthTiming {
                length: toks.len(),
                masked: mask.len(),
                wall_ms,
                mean_ms,
                std_ms,
                tokens_per_sec,
                unstable,
            });
        }
        let xs: Vec<f64> = timings.iter().map(|t| t.length as f64).collect();
        let ys: Vec<f64> = timings.iter().map(|t| t.mean_ms).collect();
        out.push(MethodThroughput {
            method,
            fit: loglog_fit(&xs, &ys),
            timings,
        });
    }
    Ok(ThroughputReport {
        version: REPORT_VERSION,
        config: cfg.clone(),
        methods: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_recovers_power_law() {
        let xs = [64.0, 128.0, 256.0, 512.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(2.2)).collect();
        let f = loglog_fit(&xs, &ys).unwrap();
        assert!((f.slope - 2.2).abs() < 1e-12);
        assert!((f.intercept - 3f64.ln()).abs() < 1e-9);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        assert!(loglog_fit(&xs[..1], &ys[..1]).is_none());
        assert!(loglog_fit(&[1.0, 2.0], &[0.0, 1.0]).is_none());
    }

    #[test]
    fn method_names_round_trip() {
        for m in BenchMethod::ALL {
            assert_eq!(m.name().parse::<BenchMethod>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!("fast".parse::<BenchMethod>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(BenchConfig::default().validate().is_ok());
        let bad = BenchConfig {
            lengths: vec![128, 64],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
