//! Token-level ROUGE-1, ROUGE-2 and ROUGE-L.
//!
//! Scores compare integer token sequences directly, with no stemming or
//! stopword handling. `f1` is the headline number; [`Quality`] stores it
//! scaled to `[0, 100]`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub fn from_counts(overlap: usize, hyp_total: usize, ref_total: usize) -> Self {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(overlap, hyp_total);
        let recall = ratio(overlap, ref_total);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }
}

fn ngram_counts(tokens: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap. Only `n = 1` and `n = 2` are used by the
/// pipeline, but any `n ≥ 1` is accepted.
pub fn rouge_n(hyp: &[TokenId], reference: &[TokenId], n: usize) -> Result<RougeScore> {
    if n == 0 {
        return Err(Error::Metric("rouge_n needs n >= 1".into()));
    }
    let hyp_counts = ngram_counts(hyp, n);
    let ref_counts = ngram_counts(reference, n);
    let overlap = hyp_counts
        .iter()
        .map(|(gram, &c)| c.min(ref_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    let total = |len: usize| (len + 1).saturating_sub(n);
    Ok(RougeScore::from_counts(overlap, total(hyp.len()), total(reference.len())))
}

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[TokenId], b: &[TokenId]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(hyp: &[TokenId], reference: &[TokenId]) -> RougeScore {
    RougeScore::from_counts(lcs_len(hyp, reference), hyp.len(), reference.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QualityMetric {
    #[serde(rename = "rouge1")]
    Rouge1,
    #[serde(rename = "rouge2")]
    Rouge2,
    #[serde(rename = "rougeL")]
    RougeL,
}

impl QualityMetric {
    pub const ALL: [QualityMetric; 3] = [QualityMetric::Rouge1, QualityMetric::Rouge2, QualityMetric::RougeL];

    pub fn name(self) -> &'static str {
        match self {
            QualityMetric::Rouge1 => "rouge1",
            QualityMetric::Rouge2 => "rouge2",
            QualityMetric::RougeL => "rougeL",
        }
    }
}

impl fmt::Display for QualityMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QualityMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        QualityMetric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("metric", format!("unknown quality metric {s:?}")))
    }
}

/// ROUGE F1 scores scaled to `[0, 100]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Quality {
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
}

impl Quality {
    pub fn score(hyp: &[TokenId], reference: &[TokenId]) -> Self {
        let f = |s: RougeScore| 100.0 * s.f1;
        Self {
            rouge1: f(rouge_n(hyp, reference, 1).expect("n = 1")),
            rouge2: f(rouge_n(hyp, reference, 2).expect("n = 2")),
            rouge_l: f(rouge_l(hyp, reference)),
        }
    }

    pub fn get(&self, metric: QualityMetric) -> f64 {
        match metric {
            QualityMetric::Rouge1 => self.rouge1,
            QualityMetric::Rouge2 => self.rouge2,
            QualityMetric::RougeL => self.rouge_l,
        }
    }
}
