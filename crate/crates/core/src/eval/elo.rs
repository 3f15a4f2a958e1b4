//! Bradley–Terry ratings from pairwise comparisons, fitted in batch by
//! regularized Newton iterations.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::REPORT_VERSION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    A,
    B,
    Tie,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonRecord {
    pub item: String,
    pub a: String,
    pub b: String,
    pub outcome: Outcome,
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<ComparisonRecord>> {
    let f = fs::File::open(path.as_ref())?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{} line {}: {e}", path.as_ref().display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records(path: impl AsRef<Path>, records: &[ComparisonRecord]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EloConfig {
    pub scale: f64,
    pub base: f64,
    pub init: f64,
    /// Ridge penalty on natural-log strengths.
    pub l2: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for EloConfig {
    fn default() -> Self {
        EloConfig {
            scale: 400.0,
            base: 10.0,
            init: 1000.0,
            l2: 1e-4,
            max_iter: 100,
            tol: 1e-12,
        }
    }
}

impl EloConfig {
    fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !(self.base > 1.0) {
            return Err(Error::config("elo", "scale must be > 0 and base > 1"));
        }
        if !(self.l2 > 0.0) {
            return Err(Error::config("elo.l2", "regularizer must be > 0"));
        }
        Ok(())
    }

    /// P(A beats B) for ratings `ra`, `rb`.
    pub fn win_probability(&self, ra: f64, rb: f64) -> f64 {
        1.0 / (1.0 + self.base.powf((rb - ra) / self.scale))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EloTable {
    pub version: u32,
    pub config: EloConfig,
    pub ratings: BTreeMap<String, f64>,
    /// Models grouped by connected component of the comparison graph.
    pub components: Vec<Vec<String>>,
    /// False when ratings are only comparable within a component.
    pub connected: bool,
    pub records: usize,
    pub iterations: usize,
    pub converged: bool,
    pub log_likelihood: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn find(parent: &mut [usize], i: usize) -> usize {
    let mut r = i;
    while parent[r] != r {
        r = parent[r];
    }
    let mut j = i;
    while parent[j] != r {
        let next = parent[j];
        parent[j] = r;
        j = next;
    }
    r
}

struct Pair {
    i: usize,
    j: usize,
    /// wins of `i` over `j`, ties counted as half
    wins: f64,
    games: f64,
}

fn objective(pairs: &[Pair], theta: &DVector<f64>, l2: f64) -> f64 {
    let ll: f64 = pairs
        .iter()
        .map(|p| {
            let d = theta[p.i] - theta[p.j];
            p.wins * ln_sigmoid(d) + (p.games - p.wins) * ln_sigmoid(-d)
        })
        .sum();
    ll - 0.5 * l2 * theta.norm_squared()
}

fn ln_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn bradley_terry(records: &[ComparisonRecord], cfg: &EloConfig) -> Result<EloTable> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::contract("rating fit needs at least one comparison"));
    }
    let mut names: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        if r.a == r.b {
            return Err(Error::contract(format!("record {:?} compares {} with itself", r.item, r.a)));
        }
        names.entry(&r.a).or_default();
        names.entry(&r.b).or_default();
    }
    for (k, v) in names.values_mut().enumerate() {
        *v = k;
    }
    let n = names.len();

    // aggregate per unordered pair so the fit does not depend on record order
    let mut agg: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
    let mut parent: Vec<usize> = (0..n).collect();
    for r in records {
        let (a, b) = (names[r.a.as_str()], names[r.b.as_str()]);
        let score_a = match r.outcome {
            Outcome::A => 1.0,
            Outcome::B => 0.0,
            Outcome::Tie => 0.5,
        };
        let (key, s) = if a < b { ((a, b), score_a) } else { ((b, a), 1.0 - score_a) };
        let e = agg.entry(key).or_insert((0.0, 0.0));
        e.0 += s;
        e.1 += 1.0;
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent[ra.max(rb)] = ra.min(rb);
    }
    let pairs: Vec<Pair> = agg
        .into_iter()
        .map(|((i, j), (wins, games))| Pair { i, j, wins, games })
        .collect();

    let mut theta = DVector::<f64>::zeros(n);
    let mut f = objective(&pairs, &theta, cfg.l2);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        let mut grad = -cfg.l2 * &theta;
        let mut neg_hess = DMatrix::<f64>::identity(n, n) * cfg.l2;
        for p in &pairs {
            let q = sigmoid(theta[p.i] - theta[p.j]);
            let g = p.wins - p.games * q;
            grad[p.i] += g;
            grad[p.j] -= g;
            let w = p.games * q * (1.0 - q);
            neg_hess[(p.i, p.i)] += w;
            neg_hess[(p.j, p.j)] += w;
            neg_hess[(p.i, p.j)] -= w;
            neg_hess[(p.j, p.i)] -= w;
        }
        let step = neg_hess
            .cholesky()
            .ok_or_else(|| Error::contract("rating Hessian is not positive definite"))?
            .solve(&grad);
        let mut t = 1.0;
        let mut next = &theta + &step;
        let mut f_next = objective(&pairs, &next, cfg.l2);
        while f_next < f && t > 1e-8 {
            t *= 0.5;
            next = &theta + t * &step;
            f_next = objective(&pairs, &next, cfg.l2);
        }
        let moved = (t * step.amax()).abs();
        theta = next;
        f = f_next;
        if moved < cfg.tol.max(1e-15) || grad.amax() < cfg.tol {
            converged = true;
            break;
        }
    }

    let mut comps: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        comps.entry(r).or_default().push(i);
    }
    // the ridge already centers each component at the optimum; remove
    // residual drift so the mean rating is exactly `init`
    for members in comps.values() {
        let mean = members.iter().map(|&i| theta[i]).sum::<f64>() / members.len() as f64;
        for &i in members {
            theta[i] -= mean;
        }
    }
    let to_rating = cfg.scale / cfg.base.ln();
    let by_index: Vec<&str> = {
        let mut v = vec![""; n];
        for (&name, &i) in &names {
            v[i] = name;
        }
        v
    };
    let ratings = names
        .iter()
        .map(|(&name, &i)| (name.to_string(), cfg.init + theta[i] * to_rating))
        .collect();
    let components: Vec<Vec<String>> = comps
        .values()
        .map(|m| m.iter().map(|&i| by_index[i].to_string()).collect())
        .collect();
    if components.len() > 1 {
        log::warn!("comparison graph has {} components; ratings compare only within one", components.len());
    }
    let log_likelihood = objective(&pairs, &theta, 0.0);
    Ok(EloTable {
        version: REPORT_VERSION,
        config: *cfg,
        ratings,
        connected: components.len() == 1,
        components,
        records: records.len(),
        iterations,
        converged,
        log_likelihood,
    })
}
