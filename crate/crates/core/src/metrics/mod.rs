//! Threshold-free classification metrics, bootstrap uncertainty and the
//! paired t-test.

pub mod special;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{indexed_substream, stream};

pub const DEFAULT_RESAMPLES: usize = 100;
const REDRAW_LIMIT: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Auroc,
    Auprc,
}

impl Metric {
    pub fn eval(self, scores: &[f64], labels: &[u8]) -> Result<f64> {
        match self {
            Metric::Auroc => auroc(scores, labels),
            Metric::Auprc => auprc(scores, labels),
        }
    }
}

fn check(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Contract("NaN score".into()));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::Contract("labels must be 0 or 1".into()));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Indices sorted by descending score, grouped into runs of equal score.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half (Mann-Whitney statistic with midranks).
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::MetricUndefined("auroc needs both classes".into()));
    }
    let mut groups = tie_groups(scores);
    groups.reverse();
    let mut rank_sum = 0.0;
    let mut seen = 0usize;
    for g in &groups {
        let mid = seen as f64 + (g.len() as f64 + 1.0) / 2.0;
        rank_sum += mid * g.iter().filter(|&&i| labels[i] == 1).count() as f64;
        seen += g.len();
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision: the mean over positives of the precision at each
/// positive's rank. Within a run of tied scores the value is the exact
/// expectation over all orderings of the run.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check(scores, labels)?;
    if pos == 0 {
        return Err(Error::MetricUndefined("auprc needs at least one positive".into()));
    }
    let mut total = 0.0;
    let mut before = 0usize;
    let mut pos_before = 0usize;
    for g in tie_groups(scores) {
        let size = g.len();
        let a = g.iter().filter(|&&i| labels[i] == 1).count();
        if a > 0 {
            let (gf, af) = (size as f64, a as f64);
            for j in 1..=size {
                // other positives expected among the j-1 slots ahead of a
                // positive placed at slot j
                let others = if size > 1 {
                    (j - 1) as f64 * (af - 1.0) / (gf - 1.0)
                } else {
                    0.0
                };
                total += af / gf * (pos_before as f64 + 1.0 + others) / (before + j) as f64;
            }
        }
        before += size;
        pos_before += a;
    }
    Ok(total / pos as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub mean: f64,
    pub std: f64,
    pub resamples: Vec<f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Full-size resample indices for resample `b`. Resamples lacking a
/// class are redrawn from the same stream.
pub fn resample_indices(labels: &[u8], seed: u64, b: usize) -> Result<Vec<usize>> {
    let n = labels.len();
    let mut rng = indexed_substream(seed, stream::BOOTSTRAP, b as u64);
    for _ in 0..REDRAW_LIMIT {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let pos = idx.iter().filter(|&&i| labels[i] == 1).count();
        if pos > 0 && pos < n {
            return Ok(idx);
        }
    }
    Err(Error::MetricUndefined(format!(
        "bootstrap resample {b} lacked a class after {REDRAW_LIMIT} draws"
    )))
}

/// `B` resamples with replacement; each resample's seed is derived from
/// `(seed, b)` so the result is independent of scheduling.
pub fn bootstrap(scores: &[f64], labels: &[u8], metric: Metric, resamples: usize, seed: u64) -> Result<BootstrapResult> {
    check(scores, labels)?;
    if resamples < 2 {
        return Err(Error::Config("bootstrap needs at least 2 resamples".into()));
    }
    if labels.is_empty() {
        return Err(Error::MetricUndefined("empty scored set".into()));
    }
    let values = (0..resamples)
        .into_par_iter()
        .map(|b| {
            let idx = resample_indices(labels, seed, b)?;
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let y: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
            metric.eval(&s, &y)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (mean, std) = mean_std(&values);
    Ok(BootstrapResult {
        mean,
        std,
        resamples: values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
    /// Set when the differences have zero variance and the p-value comes
    /// from the degenerate convention.
    pub degenerate: bool,
}

/// Paired two-sided t-test on `a - b` with `n - 1` degrees of freedom.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Contract(format!(
            "paired t-test needs two equal samples of length >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var == 0.0 {
        let (t, p) = if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (mean.signum() * f64::INFINITY, 0.0)
        };
        return Ok(TTest {
            t,
            p,
            df,
            degenerate: true,
        });
    }
    let t = mean / (var / n as f64).sqrt();
    Ok(TTest {
        t,
        p: special::student_t_two_sided(t, df as f64),
        df,
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub point: f64,
    pub mean: f64,
    pub std: f64,
    pub resamples: Vec<f64>,
}

impl MetricSummary {
    pub fn compute(scores: &[f64], labels: &[u8], metric: Metric, resamples: usize, seed: u64) -> Result<Self> {
        let point = metric.eval(scores, labels)?;
        let b = bootstrap(scores, labels, metric, resamples, seed)?;
        Ok(Self {
            point,
            mean: b.mean,
            std: b.std,
            resamples: b.resamples,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub metric: Metric,
    pub baseline: String,
    pub candidate: String,
    /// `t` of candidate minus baseline; `None` when it is infinite.
    pub t: Option<f64>,
    pub p: f64,
    pub df: usize,
    pub degenerate: bool,
}

impl Significance {
    pub fn compare(metric: Metric, baseline: (&str, &MetricSummary), candidate: (&str, &MetricSummary)) -> Result<Self> {
        let r = paired_t_test(&candidate.1.resamples, &baseline.1.resamples)?;
        Ok(Self {
            metric,
            baseline: baseline.0.to_string(),
            candidate: candidate.0.to_string(),
            t: r.t.is_finite().then_some(r.t),
            p: r.p,
            df: r.df,
            degenerate: r.degenerate,
        })
    }
}

/// Serialised as `metrics.json`; field order is fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub patients: usize,
    pub positives: usize,
    pub bootstrap_seed: u64,
    pub auprc: MetricSummary,
    pub auroc: MetricSummary,
    pub significance: Vec<Significance>,
}

impl MetricsReport {
    pub fn compute(scores: &[f64], labels: &[u8], resamples: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            patients: labels.len(),
            positives: labels.iter().filter(|&&y| y == 1).count(),
            bootstrap_seed: seed,
            auprc: MetricSummary::compute(scores, labels, Metric::Auprc, resamples, seed)?,
            auroc: MetricSummary::compute(scores, labels, Metric::Auroc, resamples, seed)?,
            significance: Vec::new(),
        })
    }

    pub fn summary(&self, metric: Metric) -> &MetricSummary {
        match metric {
            Metric::Auroc => &self.auroc,
            Metric::Auprc => &self.auprc,
        }
    }
}
