//! Posterior-mean decoding.
//!
//! Every method exposes `M` conditional distributions per decoding step:
//! Monte Carlo dropout samples, batch-ensemble members, deep-ensemble
//! networks, or a single deterministic network. Decoding runs beam search on
//! the log of their average, `p̄ = (1/M) Σ p_m`.

use std::io::{BufRead, BufWriter, Write};
use std::fmt::Write as _;
use std::fs::File;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ExampleRecord, TokenId};
use crate::error::{Error, Result};
use crate::model::{Mode, ModelBundle, Network};
use crate::rng::{derive_seed, hash_str};
use crate::rouge::Quality;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosteriorConfig {
    pub beam_size: usize,
    pub max_len: usize,
    /// Rank completed hypotheses by mean rather than total log-probability.
    pub length_norm: bool,
    /// Also use the normalized score when pruning beams.
    pub length_norm_pruning: bool,
}

impl Default for PosteriorConfig {
    fn default() -> Self {
        Self {
            beam_size: 3,
            max_len: 16,
            length_norm: true,
            length_norm_pruning: false,
        }
    }
}

impl PosteriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::config("posterior.beam_size", "must be at least 1"));
        }
        if self.max_len == 0 {
            return Err(Error::config("posterior.max_len", "must be at least 1"));
        }
        Ok(())
    }
}

/// Elementwise mean of probability vectors.
pub fn posterior_mean(dists: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = dists
        .first()
        .ok_or_else(|| Error::Input("posterior mean of zero distributions".into()))?;
    let mut mean = vec![0.0; first.len()];
    for d in dists {
        if d.len() != mean.len() {
            return Err(Error::Input("distributions differ in length".into()));
        }
        for (m, p) in mean.iter_mut().zip(d) {
            *m += p;
        }
    }
    let inv = 1.0 / dists.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    Ok(mean)
}

/// The predictive distribution of a trained bundle.
#[derive(Debug, Clone, Copy)]
pub struct Posterior<'a> {
    bundle: &'a ModelBundle,
    run_seed: u64,
}

impl<'a> Posterior<'a> {
    /// `run_seed` drives the Monte Carlo dropout masks; it is unused by
    /// deterministic methods.
    pub fn new(bundle: &'a ModelBundle, run_seed: u64) -> Self {
        Self { bundle, run_seed }
    }

    pub fn num_samples(&self) -> usize {
        let method = self.bundle.config.method;
        if method.uses_dropout() {
            self.bundle.config.samples
        } else {
            self.bundle.members.iter().map(Network::num_members).sum()
        }
    }

    /// Per-sample distributions `p_m(· | prefix, input)`. Dropout sample `m`
    /// at step `t` uses masks seeded by `(run seed, example, m, t)`, so
    /// every beam sharing a step sees the same masks.
    pub fn sample_distributions(
        &self,
        example_key: u64,
        input: &[TokenId],
        prefix: &[TokenId],
    ) -> Result<Vec<Vec<f64>>> {
        let step = prefix.len() as u64;
        if self.bundle.config.method.uses_dropout() {
            let net = &self.bundle.members[0];
            (0..self.bundle.config.samples as u64)
                .map(|m| {
                    let seed = derive_seed(self.run_seed, &[example_key, m, step]);
                    net.predict_proba(0, input, prefix, Mode::MonteCarlo { seed })
                })
                .collect()
        } else {
            let mut out = Vec::with_capacity(self.num_samples());
            for net in &self.bundle.members {
                for k in 0..net.num_members() {
                    out.push(net.predict_proba(k, input, prefix, Mode::Infer)?);
                }
            }
            Ok(out)
        }
    }

    pub fn distribution(&self, example_key: u64, input: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
        let p = posterior_mean(&self.sample_distributions(example_key, input, prefix)?)?;
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite posterior probability".into()));
        }
        Ok(p)
    }
}

/// Special tokens that shape decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeTokens {
    pub pad: TokenId,
    pub bos: TokenId,
    pub eos: TokenId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Includes the terminating `eos` when one was generated.
    pub tokens: Vec<TokenId>,
    pub token_logp: Vec<f64>,
}

impl Hypothesis {
    pub fn total_logp(&self) -> f64 {
        self.token_logp.iter().sum()
    }

    pub fn score(&self, length_norm: bool) -> f64 {
        let total = self.total_logp();
        if length_norm {
            total / self.tokens.len() as f64
        } else {
            total
        }
    }
}

#[derive(Debug, Clone)]
struct Beam {
    tokens: Vec<TokenId>,
    total: f64,
    done: bool,
}

impl Beam {
    fn key(&self, length_norm: bool) -> f64 {
        if length_norm {
            self.total / self.tokens.len() as f64
        } else {
            self.total
        }
    }
}

/// Higher score first; equal scores fall back to lexicographic token order.
fn rank(beams: &mut [Beam], length_norm: bool) {
    beams.sort_by(|a, b| {
        b.key(length_norm)
            .total_cmp(&a.key(length_norm))
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
}

/// Beam search over `ln next(prefix)`. Completed hypotheses stay in the
/// beam and compete with live ones; `pad` and `bos` are never emitted.
/// The returned per-token log-probabilities are recomputed along the
/// winning hypothesis.
pub fn beam_decode(
    mut next: impl FnMut(&[TokenId]) -> Result<Vec<f64>>,
    specials: DecodeTokens,
    config: &PosteriorConfig,
) -> Result<Hypothesis> {
    config.validate()?;
    let mut beams = vec![Beam {
        tokens: Vec::new(),
        total: 0.0,
        done: false,
    }];
    for _ in 0..config.max_len {
        let mut pool = Vec::new();
        for beam in beams {
            if beam.done {
                pool.push(beam);
                continue;
            }
            let dist = next(&beam.tokens)?;
            for (tok, &p) in dist.iter().enumerate() {
                let tok = tok as TokenId;
                if tok == specials.pad || tok == specials.bos {
                    continue;
                }
                let mut tokens = beam.tokens.clone();
                tokens.push(tok);
                let done = tok == specials.eos || tokens.len() == config.max_len;
                pool.push(Beam {
                    tokens,
                    total: beam.total + p.ln(),
                    done,
                });
            }
        }
        if pool.is_empty() {
            return Err(Error::Input("no emittable tokens".into()));
        }
        rank(&mut pool, config.length_norm_pruning);
        pool.truncate(config.beam_size);
        beams = pool;
        if beams.iter().all(|b| b.done) {
            break;
        }
    }
    rank(&mut beams, config.length_norm);
    let best = beams.swap_remove(0);
    let token_logp = score_hypothesis(&mut next, &best.tokens)?;
    Ok(Hypothesis {
        tokens: best.tokens,
        token_logp,
    })
}

/// `ln p̄(y_t | y_<t)` for every position of `tokens`.
pub fn score_hypothesis(
    mut next: impl FnMut(&[TokenId]) -> Result<Vec<f64>>,
    tokens: &[TokenId],
) -> Result<Vec<f64>> {
    (0..tokens.len())
        .map(|t| {
            let dist = next(&tokens[..t])?;
            let p = *dist
                .get(tokens[t] as usize)
                .ok_or_else(|| Error::Input(format!("token {} outside distribution", tokens[t])))?;
            Ok(p.ln())
        })
        .collect()
}

/// Length-normalized log-probability, `(1/T) Σ ln p̄(y_t)`.
pub fn uncertainty_score(token_logp: &[f64]) -> Result<f64> {
    if token_logp.is_empty() {
        return Err(Error::Metric("uncertainty of an empty hypothesis".into()));
    }
    Ok(token_logp.iter().sum::<f64>() / token_logp.len() as f64)
}

/// One decoded test example as written to prediction JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub id: String,
    pub hypothesis: Vec<TokenId>,
    pub token_logp: Vec<f64>,
    pub uncertainty: f64,
    pub quality: Quality,
}

impl PredictionRecord {
    pub fn validate(&self) -> Result<()> {
        if self.hypothesis.len() != self.token_logp.len() {
            return Err(Error::Validation(format!(
                "{}: {} tokens but {} log-probabilities",
                self.id,
                self.hypothesis.len(),
                self.token_logp.len()
            )));
        }
        if self.hypothesis.is_empty() {
            return Err(Error::Validation(format!("{}: empty hypothesis", self.id)));
        }
        if self.token_logp.iter().any(|&l| !(l <= 0.0)) {
            return Err(Error::Validation(format!("{}: log-probability above 0 or NaN", self.id)));
        }
        Ok(())
    }
}

/// Decodes one record. `observe` sees every posterior-mean distribution
/// computed along the way.
pub fn decode_example(
    posterior: &Posterior,
    record: &ExampleRecord,
    config: &PosteriorConfig,
    mut observe: impl FnMut(&[f64]),
) -> Result<PredictionRecord> {
    let arch = posterior.bundle.members[0].arch;
    let specials = DecodeTokens {
        pad: arch.pad,
        bos: arch.bos,
        eos: arch.eos,
    };
    let key = hash_str(&record.id);
    let input = record.input.tokens();
    let hyp = beam_decode(
        |prefix| {
            let p = posterior.distribution(key, input, prefix)?;
            observe(&p);
            Ok(p)
        },
        specials,
        config,
    )?;
    let uncertainty = uncertainty_score(&hyp.token_logp)?;
    let stripped = match hyp.tokens.split_last() {
        Some((&last, rest)) if last == arch.eos => rest,
        _ => &hyp.tokens[..],
    };
    let quality = Quality::score(stripped, record.reference.strip_eos(arch.eos));
    Ok(PredictionRecord {
        id: record.id.clone(),
        hypothesis: hyp.tokens,
        token_logp: hyp.token_logp,
        uncertainty,
        quality,
    })
}

/// Decodes every record concurrently; output order follows `records`.
pub fn decode_corpus(
    bundle: &ModelBundle,
    records: &[ExampleRecord],
    config: &PosteriorConfig,
    run_seed: u64,
) -> Result<Vec<PredictionRecord>> {
    config.validate()?;
    let posterior = Posterior::new(bundle, run_seed);
    records
        .par_iter()
        .map(|r| decode_example(&posterior, r, config, |_| {}))
        .collect()
}

fn push_float(out: &mut String, v: f64) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::Numerical(format!("cannot serialize non-finite value {v}")));
    }
    write!(out, "{v:.16e}").expect("writing to a String");
    Ok(())
}

/// One JSON line with every float printed to 17 significant digits.
pub fn format_prediction(record: &PredictionRecord) -> Result<String> {
    let mut s = String::from("{\"id\":");
    s.push_str(&serde_json::to_string(&record.id)?);
    s.push_str(",\"hypothesis\":");
    s.push_str(&serde_json::to_string(&record.hypothesis)?);
    s.push_str(",\"token_logp\":[");
    for (i, &v) in record.token_logp.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        push_float(&mut s, v)?;
    }
    s.push_str("],\"uncertainty\":");
    push_float(&mut s, record.uncertainty)?;
    let q = &record.quality;
    for (key, v) in [(",\"quality\":{\"rouge1\":", q.rouge1), (",\"rouge2\":", q.rouge2), (",\"rougeL\":", q.rouge_l)] {
        s.push_str(key);
        push_float(&mut s, v)?;
    }
    s.push_str("}}");
    Ok(s)
}

pub fn write_predictions(records: &[PredictionRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        writeln!(w, "{}", format_prediction(r)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_predictions(reader: impl BufRead) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PredictionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        record.validate()?;
        out.push(record);
    }
    Ok(out)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    parse_predictions(std::io::BufReader::new(File::open(path)?))
}
