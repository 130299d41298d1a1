//! Calibration and selective-generation metrics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{ExampleRecord, TokenId};
use crate::error::{Error, Result};
use crate::inference::PredictionRecord;
use crate::rng::Rng;
use crate::rouge::QualityMetric;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EceLevel {
    Sequence,
    Token,
}

impl EceLevel {
    pub fn name(self) -> &'static str {
        match self {
            EceLevel::Sequence => "sequence",
            EceLevel::Token => "token",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EceConfig {
    pub bins: usize,
    pub levels: Vec<EceLevel>,
}

impl Default for EceConfig {
    fn default() -> Self {
        Self {
            bins: 15,
            levels: vec![EceLevel::Sequence, EceLevel::Token],
        }
    }
}

impl EceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 {
            return Err(Error::config("ece.bins", "must be at least 1"));
        }
        Ok(())
    }
}

/// Quality thresholds separating "good" from "bad" outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RocConfig {
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
}

impl Default for RocConfig {
    fn default() -> Self {
        Self {
            rouge1: 40.0,
            rouge2: 15.0,
            rouge_l: 30.0,
        }
    }
}

impl RocConfig {
    pub fn threshold(&self, metric: QualityMetric) -> f64 {
        match metric {
            QualityMetric::Rouge1 => self.rouge1,
            QualityMetric::Rouge2 => self.rouge2,
            QualityMetric::RougeL => self.rouge_l,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for m in QualityMetric::ALL {
            if !(0.0..=100.0).contains(&self.threshold(m)) {
                return Err(Error::config(format!("roc.{m}"), "must lie in [0, 100]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub confidence: f64,
    pub correct: bool,
}

/// A prediction joined with its reference.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub prediction: PredictionRecord,
    pub reference: Vec<TokenId>,
}

/// Pairs every prediction with the reference of the example sharing its id.
pub fn join_references(predictions: Vec<PredictionRecord>, examples: &[ExampleRecord]) -> Result<Vec<EvalRecord>> {
    let refs: HashMap<&str, &ExampleRecord> = examples.iter().map(|r| (r.id.as_str(), r)).collect();
    predictions
        .into_iter()
        .map(|p| {
            let example = refs
                .get(p.id.as_str())
                .ok_or_else(|| Error::Validation(format!("prediction {} has no matching example", p.id)))?;
            Ok(EvalRecord {
                reference: example.reference.tokens().to_vec(),
                prediction: p,
            })
        })
        .collect()
}

/// Bin of `p` among `(k/K, (k+1)/K]`, `k = 0..K`.
pub fn ece_bin(p: f64, bins: usize) -> usize {
    let k = bins as f64;
    let mut i = ((p * k).ceil() as usize).clamp(1, bins) - 1;
    // Guard the multiplication against rounding across a boundary.
    while i > 0 && p <= i as f64 / k {
        i -= 1;
    }
    while i + 1 < bins && p > (i + 1) as f64 / k {
        i += 1;
    }
    i
}

pub fn ece(pairs: &[ScoredPair], bins: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Metric("ECE of an empty set".into()));
    }
    if bins == 0 {
        return Err(Error::config("ece.bins", "must be at least 1"));
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut acc = vec![0.0; bins];
    for pair in pairs {
        let p = pair.confidence;
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Metric(format!("confidence {p} outside (0, 1]")));
        }
        let b = ece_bin(p, bins);
        count[b] += 1;
        conf[b] += p;
        acc[b] += if pair.correct { 1.0 } else { 0.0 };
    }
    let n = pairs.len() as f64;
    let mut total = 0.0;
    for b in 0..bins {
        if count[b] > 0 {
            let c = count[b] as f64;
            total += c / n * (conf[b] / c - acc[b] / c).abs();
        }
    }
    Ok(total)
}

fn strip_eos(tokens: &[TokenId], eos: TokenId) -> &[TokenId] {
    match tokens.split_last() {
        Some((&last, rest)) if last == eos => rest,
        _ => tokens,
    }
}

/// Joint sequence probability against exact (eos-insensitive) match.
pub fn sequence_pairs(records: &[EvalRecord], eos: TokenId) -> Vec<ScoredPair> {
    records
        .iter()
        .map(|r| {
            let logp: f64 = r.prediction.token_logp.iter().sum();
            ScoredPair {
                confidence: logp.exp().max(f64::MIN_POSITIVE),
                correct: strip_eos(&r.prediction.hypothesis, eos) == strip_eos(&r.reference, eos),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TokenCoverage {
    pub scored: usize,
    /// Hypothesis positions beyond the reference length.
    pub skipped: usize,
}

impl TokenCoverage {
    pub fn fraction(&self) -> f64 {
        let total = self.scored + self.skipped;
        if total == 0 {
            0.0
        } else {
            self.scored as f64 / total as f64
        }
    }
}

/// Per-position pairs up to the shorter of hypothesis and reference.
pub fn token_pairs(records: &[EvalRecord]) -> (Vec<ScoredPair>, TokenCoverage) {
    let mut pairs = Vec::new();
    let mut coverage = TokenCoverage::default();
    for r in records {
        let hyp = &r.prediction.hypothesis;
        let n = hyp.len().min(r.reference.len());
        for t in 0..n {
            pairs.push(ScoredPair {
                confidence: r.prediction.token_logp[t].exp().max(f64::MIN_POSITIVE),
                correct: hyp[t] == r.reference[t],
            });
        }
        coverage.scored += n;
        coverage.skipped += hyp.len() - n;
    }
    (pairs, coverage)
}

/// 1-based ranks, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Metric(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Metric("correlation needs at least 2 points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut cov, mut vx, mut vy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Metric("correlation undefined for constant input".into()));
    }
    Ok((cov / (vx * vy).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman(u: &[f64], quality: &[f64]) -> Result<f64> {
    if u.len() != quality.len() {
        return Err(Error::Metric(format!("length mismatch: {} vs {}", u.len(), quality.len())));
    }
    if u.iter().chain(quality).any(|v| v.is_nan()) {
        return Err(Error::Metric("NaN in correlation input".into()));
    }
    pearson(&average_ranks(u), &average_ranks(quality))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bootstrap {
    /// Spearman correlation on the full sample.
    pub rho: f64,
    /// Sample standard deviation over successful resamples.
    pub std: f64,
    pub resamples: usize,
    /// Resamples whose correlation was undefined.
    pub skipped: usize,
}

pub fn bootstrap_std(u: &[f64], quality: &[f64], resamples: usize, seed: u64) -> Result<Bootstrap> {
    if resamples < 2 {
        return Err(Error::config("bootstrap.resamples", "must be at least 2"));
    }
    let rho = spearman(u, quality)?;
    let n = u.len();
    let mut rng = Rng::new(seed);
    let mut values = Vec::with_capacity(resamples);
    let mut skipped = 0;
    let (mut bu, mut bq) = (vec![0.0; n], vec![0.0; n]);
    for _ in 0..resamples {
        for k in 0..n {
            let i = rng.index(n);
            bu[k] = u[i];
            bq[k] = quality[i];
        }
        match spearman(&bu, &bq) {
            Ok(r) => values.push(r),
            Err(_) => skipped += 1,
        }
    }
    if values.len() < 2 {
        return Err(Error::Metric(format!(
            "bootstrap: only {} of {resamples} resamples had a defined correlation",
            values.len()
        )));
    }
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    Ok(Bootstrap {
        rho,
        std: var.sqrt(),
        resamples,
        skipped,
    })
}

/// Probability that a good output (`quality > threshold`) has a higher `u`
/// than a bad one, ties counting one half.
pub fn roc_auc(u: &[f64], quality: &[f64], threshold: f64) -> Result<f64> {
    if u.len() != quality.len() {
        return Err(Error::Metric(format!("length mismatch: {} vs {}", u.len(), quality.len())));
    }
    if u.iter().any(|v| v.is_nan()) {
        return Err(Error::Metric("NaN in AUC input".into()));
    }
    let good: Vec<bool> = quality.iter().map(|&q| q > threshold).collect();
    let n_good = good.iter().filter(|&&g| g).count();
    let n_bad = good.len() - n_good;
    if n_good == 0 || n_bad == 0 {
        return Err(Error::Metric(format!(
            "AUC needs both classes: {n_good} good, {n_bad} bad at threshold {threshold}"
        )));
    }
    let ranks = average_ranks(u);
    let rank_sum: f64 = ranks.iter().zip(&good).filter(|(_, &g)| g).map(|(r, _)| r).sum();
    let u_stat = rank_sum - (n_good * (n_good + 1)) as f64 / 2.0;
    Ok(u_stat / (n_good as f64 * n_bad as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbstentionItem<'a> {
    pub id: &'a str,
    pub u: f64,
    pub quality: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbstentionCurve {
    pub alphas: Vec<f64>,
    pub values: Vec<f64>,
}

/// `α ∈ {0, 0.05, …, 0.95}`
pub fn default_alphas() -> Vec<f64> {
    (0..20).map(|k| k as f64 / 20.0).collect()
}

/// Mean quality after removing the `⌊α·n⌋` items with the lowest `u`
/// (ties broken by id).
pub fn abstention_curve(items: &[AbstentionItem], alphas: &[f64]) -> Result<AbstentionCurve> {
    if items.is_empty() {
        return Err(Error::Metric("abstention curve of an empty set".into()));
    }
    for (i, &a) in alphas.iter().enumerate() {
        if !(0.0..1.0).contains(&a) {
            return Err(Error::config("abstention.alphas", format!("{a} outside [0, 1)")));
        }
        if i > 0 && a < alphas[i - 1] {
            return Err(Error::config("abstention.alphas", "must be sorted"));
        }
    }
    if items.iter().any(|it| it.u.is_nan()) {
        return Err(Error::Metric("NaN uncertainty".into()));
    }
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        items[a]
            .u
            .total_cmp(&items[b].u)
            .then_with(|| items[a].id.cmp(items[b].id))
    });
    let mut removed = vec![false; n];
    let mut values = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let drop = (alpha * n as f64).floor() as usize;
        removed.iter_mut().for_each(|r| *r = false);
        for &i in &order[..drop] {
            removed[i] = true;
        }
        let (mut sum, mut kept) = (0.0, 0usize);
        for (item, &gone) in items.iter().zip(&removed) {
            if !gone {
                sum += item.quality;
                kept += 1;
            }
        }
        values.push(sum / kept as f64);
    }
    Ok(AbstentionCurve {
        alphas: alphas.to_vec(),
        values,
    })
}
