//! Metric tables for evaluated methods.
//!
//! Every table has one row per method even when its predictions are missing
//! or a metric is undefined; such cells hold `NA`.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use seqcal::calib::{
    abstention_curve, average_ranks, bootstrap_std, ece, join_references, roc_auc, sequence_pairs,
    token_pairs, AbstentionCurve, AbstentionItem, Bootstrap, EceLevel, EvalRecord, TokenCoverage,
};
use seqcal::corpus::{ExampleRecord, Vocabulary};
use seqcal::inference::read_predictions;
use seqcal::model::Method;
use seqcal::rouge::{Quality, QualityMetric};
use seqcal::{Error, Result};

use crate::config::RunConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct MethodReport {
    pub method: Method,
    /// `None` when the method has no prediction file.
    pub records: Option<Vec<EvalRecord>>,
    pub mean_quality: Option<Quality>,
    pub ece: Vec<(EceLevel, Option<f64>)>,
    pub coverage: Option<TokenCoverage>,
    pub correlation: Vec<(QualityMetric, Option<Bootstrap>)>,
    pub auc: Vec<(QualityMetric, Option<f64>)>,
    pub abstention: Vec<(QualityMetric, Option<AbstentionCurve>)>,
    /// Rank per quality metric among methods with predictions (1 = best).
    pub ranks: Vec<(QualityMetric, Option<f64>)>,
}

impl MethodReport {
    pub fn ece(&self, level: EceLevel) -> Option<f64> {
        lookup(&self.ece, &level).flatten()
    }

    pub fn rho(&self, metric: QualityMetric) -> Option<f64> {
        lookup(&self.correlation, &metric).flatten().map(|b| b.rho)
    }

    pub fn curve(&self, metric: QualityMetric) -> Option<&AbstentionCurve> {
        self.abstention.iter().find(|(m, _)| *m == metric).and_then(|(_, c)| c.as_ref())
    }

    pub fn average_rank(&self) -> Option<f64> {
        let ranks: Option<Vec<f64>> = self.ranks.iter().map(|(_, r)| *r).collect();
        ranks.map(|r| r.iter().sum::<f64>() / r.len() as f64)
    }
}

fn lookup<K: PartialEq, V: Clone>(pairs: &[(K, V)], key: &K) -> Option<V> {
    pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub methods: Vec<MethodReport>,
}

impl EvalReport {
    pub fn method(&self, method: Method) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == method)
    }
}

fn metric<T>(what: &str, method: Method, result: Result<T>) -> Option<T> {
    match result {
        Ok(v) => Some(v),
        Err(e) => {
            warn!("{method}: {what} unavailable: {e}");
            None
        }
    }
}

fn evaluate_method(config: &RunConfig, method: Method, vocab: &Vocabulary, test: &[ExampleRecord]) -> Result<MethodReport> {
    let path = config.predictions_path(method);
    let records = if path.exists() {
        Some(join_references(read_predictions(&path)?, test)?)
    } else {
        warn!("{method}: no predictions at {}", path.display());
        None
    };
    let recs = records.as_deref().unwrap_or(&[]);
    let present = records.is_some() && !recs.is_empty();
    let u: Vec<f64> = recs.iter().map(|r| r.prediction.uncertainty).collect();
    let quality = |m: QualityMetric| -> Vec<f64> { recs.iter().map(|r| r.prediction.quality.get(m)).collect() };

    let mean_quality = present.then(|| {
        let n = recs.len() as f64;
        let mean = |m| quality(m).iter().sum::<f64>() / n;
        Quality {
            rouge1: mean(QualityMetric::Rouge1),
            rouge2: mean(QualityMetric::Rouge2),
            rouge_l: mean(QualityMetric::RougeL),
        }
    });

    let (tokens, coverage) = token_pairs(recs);
    let ece_rows = config
        .ece
        .levels
        .iter()
        .map(|&level| {
            let value = present.then(|| {
                let pairs = match level {
                    EceLevel::Sequence => sequence_pairs(recs, vocab.eos),
                    EceLevel::Token => tokens.clone(),
                };
                metric(&format!("{} ECE", level.name()), method, ece(&pairs, config.ece.bins))
            });
            (level, value.flatten())
        })
        .collect();

    let mut correlation = Vec::new();
    let mut auc = Vec::new();
    let mut abstention = Vec::new();
    for m in QualityMetric::ALL {
        let q = quality(m);
        let (c, a, curve) = if present {
            let items: Vec<AbstentionItem> = recs
                .iter()
                .zip(&q)
                .map(|(r, &quality)| AbstentionItem {
                    id: &r.prediction.id,
                    u: r.prediction.uncertainty,
                    quality,
                })
                .collect();
            (
                metric(
                    &format!("{m} correlation"),
                    method,
                    bootstrap_std(&u, &q, config.bootstrap.resamples, config.seed),
                ),
                metric(&format!("{m} AUC"), method, roc_auc(&u, &q, config.roc.threshold(m))),
                metric(
                    &format!("{m} abstention"),
                    method,
                    abstention_curve(&items, &config.abstention.alphas),
                ),
            )
        } else {
            (None, None, None)
        };
        correlation.push((m, c));
        auc.push((m, a));
        abstention.push((m, curve));
    }

    Ok(MethodReport {
        method,
        mean_quality,
        ece: ece_rows,
        coverage: present.then_some(coverage),
        correlation,
        auc,
        abstention,
        ranks: Vec::new(),
        records,
    })
}

/// Scores `methods` against the test split. Ranks are computed among the
/// methods that produced predictions.
pub fn evaluate(config: &RunConfig, methods: &[Method], vocab: &Vocabulary, test: &[ExampleRecord]) -> Result<EvalReport> {
    let mut reports = methods
        .iter()
        .map(|&m| evaluate_method(config, m, vocab, test))
        .collect::<Result<Vec<_>>>()?;
    let scored: Vec<usize> = (0..reports.len()).filter(|&i| reports[i].mean_quality.is_some()).collect();
    for r in reports.iter_mut() {
        r.ranks = QualityMetric::ALL.iter().map(|&m| (m, None)).collect();
    }
    for (k, m) in QualityMetric::ALL.into_iter().enumerate() {
        let negated: Vec<f64> = scored
            .iter()
            .map(|&i| -reports[i].mean_quality.expect("scored").get(m))
            .collect();
        for (&i, rank) in scored.iter().zip(average_ranks(&negated)) {
            reports[i].ranks[k].1 = Some(rank);
        }
    }
    Ok(EvalReport { methods: reports })
}

fn num(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x}"),
        _ => "NA".into(),
    }
}

fn table(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.write_record(&row).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

impl EvalReport {
    /// Writes `ece.csv`, `corr.csv`, `roc.csv`, `abstention.csv`,
    /// `summary.csv` and `coverage.csv` into `dir`.
    pub fn write(&self, config: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let k = config.ece.bins.to_string();
        let b = config.bootstrap.resamples.to_string();
        let seed = config.seed.to_string();
        let mut ece_rows = Vec::new();
        let mut corr_rows = Vec::new();
        let mut roc_rows = Vec::new();
        let mut abst_rows = Vec::new();
        let mut summary_rows = Vec::new();
        let mut coverage_rows = Vec::new();
        for r in &self.methods {
            let name = r.method.name().to_string();
            for (level, v) in &r.ece {
                ece_rows.push(vec![name.clone(), level.name().into(), k.clone(), num(*v)]);
            }
            for (m, boot) in &r.correlation {
                corr_rows.push(vec![
                    name.clone(),
                    m.name().into(),
                    num(boot.map(|x| x.rho)),
                    num(boot.map(|x| x.std)),
                    b.clone(),
                    seed.clone(),
                ]);
            }
            for (m, auc) in &r.auc {
                roc_rows.push(vec![name.clone(), m.name().into(), num(Some(config.roc.threshold(*m))), num(*auc)]);
            }
            for (m, curve) in &r.abstention {
                for (i, &alpha) in config.abstention.alphas.iter().enumerate() {
                    let v = curve.as_ref().map(|c| c.values[i]);
                    abst_rows.push(vec![name.clone(), m.name().into(), num(Some(alpha)), num(v)]);
                }
            }
            let n = r.records.as_ref().map(|v| v.len().to_string()).unwrap_or_else(|| "NA".into());
            let mut row = vec![name.clone(), n];
            for m in QualityMetric::ALL {
                row.push(num(r.mean_quality.map(|q| q.get(m))));
            }
            for (_, rank) in &r.ranks {
                row.push(num(*rank));
            }
            row.push(num(r.average_rank()));
            summary_rows.push(row);
            coverage_rows.push(vec![
                name,
                num(r.coverage.map(|c| c.scored as f64)),
                num(r.coverage.map(|c| c.skipped as f64)),
                num(r.coverage.map(|c| c.fraction())),
            ]);
        }
        let files = [
            ("ece.csv", vec!["method", "level", "K", "ece"], ece_rows),
            ("corr.csv", vec!["method", "metric", "rho", "boot_std", "B", "seed"], corr_rows),
            ("roc.csv", vec!["method", "metric", "theta", "auc"], roc_rows),
            ("abstention.csv", vec!["method", "metric", "alpha", "mean_quality"], abst_rows),
            (
                "summary.csv",
                vec![
                    "method",
                    "n",
                    "rouge1",
                    "rouge2",
                    "rougeL",
                    "rank_rouge1",
                    "rank_rouge2",
                    "rank_rougeL",
                    "average_rank",
                ],
                summary_rows,
            ),
            ("coverage.csv", vec!["method", "scored", "skipped", "coverage"], coverage_rows),
        ];
        let mut paths = Vec::new();
        for (file, header, rows) in files {
            let path = dir.join(file);
            table(&path, &header, rows)?;
            paths.push(path);
        }
        Ok(paths)
    }
}
