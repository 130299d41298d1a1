//! Vocabularies, synthetic sequence-to-sequence tasks, and the corpus JSONL
//! format.
//!
//! Tokens are plain integer ids into a [`Vocabulary`]. Three task kinds give a
//! difficulty gradient: `copy` (reference is a prefix of the input),
//! `keyword-extract` (reference is the input's keyword tokens, in order), and
//! `noisy-paraphrase` (a copy whose tokens are independently resampled).

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{hash_str, Rng};

pub type TokenId = u32;

/// Number of reserved ids (`pad`, `bos`, `eos`) in synthetic vocabularies.
pub const NUM_SPECIAL: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub symbols: Vec<String>,
    pub pad: TokenId,
    pub bos: TokenId,
    pub eos: TokenId,
}

impl Vocabulary {
    /// `<pad> <bos> <eos>`, then `num_keywords` keyword symbols `k0..`, then
    /// plain symbols `w0..` up to `size` entries.
    pub fn synthetic(size: usize, num_keywords: usize) -> Result<Self> {
        if size < NUM_SPECIAL + 1 {
            return Err(Error::config("vocab_size", format!("must be at least {}", NUM_SPECIAL + 1)));
        }
        if num_keywords > size - NUM_SPECIAL {
            return Err(Error::config(
                "num_keywords",
                format!("{num_keywords} exceeds the {} content tokens", size - NUM_SPECIAL),
            ));
        }
        let mut symbols = vec!["<pad>".to_string(), "<bos>".to_string(), "<eos>".to_string()];
        symbols.extend((0..num_keywords).map(|i| format!("k{i}")));
        symbols.extend((0..size - NUM_SPECIAL - num_keywords).map(|i| format!("w{i}")));
        let vocab = Self {
            symbols,
            pad: 0,
            bos: 1,
            eos: 2,
        };
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.symbols.len();
        if n < 4 {
            return Err(Error::Validation(format!("vocabulary has {n} symbols, need at least 4")));
        }
        for (name, id) in [("pad", self.pad), ("bos", self.bos), ("eos", self.eos)] {
            if id as usize >= n {
                return Err(Error::Validation(format!("{name} id {id} out of range for {n} symbols")));
            }
        }
        if self.pad == self.bos || self.pad == self.eos || self.bos == self.eos {
            return Err(Error::Validation("pad, bos and eos must be distinct".into()));
        }
        let mut seen = HashSet::new();
        for s in &self.symbols {
            if !seen.insert(s.as_str()) {
                return Err(Error::Validation(format!("duplicate symbol {s:?}")));
            }
        }
        Ok(())
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id == self.pad || id == self.bos || id == self.eos
    }

    /// Ids a decoder may emit: everything except `pad` and `bos`.
    pub fn emittable(&self) -> Vec<TokenId> {
        (0..self.len() as TokenId)
            .filter(|&t| t != self.pad && t != self.bos)
            .collect()
    }

    /// Ids that are neither `pad`, `bos` nor `eos`.
    pub fn content(&self) -> Vec<TokenId> {
        (0..self.len() as TokenId).filter(|&t| !self.is_special(t)).collect()
    }

    /// Hex SHA-256 of the canonical JSON encoding; bundles record it so a
    /// model is never decoded against a different vocabulary.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("vocabulary serializes");
        hex::encode(Sha256::digest(canonical))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let vocab: Vocabulary = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

/// A nonempty sequence of token ids with at most one `eos`, in final position.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<TokenId>);

impl TokenSequence {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Self(tokens)
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<TokenId> {
        self.0
    }

    /// The tokens without a terminal `eos`.
    pub fn strip_eos(&self, eos: TokenId) -> &[TokenId] {
        match self.0.split_last() {
            Some((&last, rest)) if last == eos => rest,
            _ => &self.0,
        }
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::Validation("empty token sequence".into()));
        }
        let n = vocab.len();
        if let Some(&bad) = self.0.iter().find(|&&t| t as usize >= n) {
            return Err(Error::Input(format!("token {bad} out of vocabulary of size {n}")));
        }
        if self.0[..self.0.len() - 1].contains(&vocab.eos) {
            return Err(Error::Validation("eos before the end of a sequence".into()));
        }
        Ok(())
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(tokens: Vec<TokenId>) -> Self {
        Self(tokens)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    KeywordExtract,
    NoisyParaphrase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    /// Keywords are the first `num_keywords` content ids.
    #[serde(default)]
    pub num_keywords: usize,
    pub input_len: usize,
    pub output_len: usize,
    #[serde(default)]
    pub noise_rate: f64,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < NUM_SPECIAL + 1 {
            return Err(Error::config("vocab_size", format!("must be at least {}", NUM_SPECIAL + 1)));
        }
        let content = self.vocab_size - NUM_SPECIAL;
        if self.input_len == 0 {
            return Err(Error::config("input_len", "must be at least 1"));
        }
        if self.output_len == 0 {
            return Err(Error::config("output_len", "must be at least 1"));
        }
        if self.output_len > self.input_len {
            return Err(Error::config(
                "output_len",
                format!("{} exceeds input_len {}", self.output_len, self.input_len),
            ));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::config("noise_rate", "must lie in [0, 1]"));
        }
        match self.kind {
            TaskKind::Copy if self.noise_rate != 0.0 => {
                return Err(Error::config("noise_rate", "must be 0 for the copy task"));
            }
            TaskKind::KeywordExtract => {
                if self.num_keywords == 0 {
                    return Err(Error::config("num_keywords", "keyword-extract needs at least one keyword"));
                }
                if self.num_keywords >= content {
                    return Err(Error::config(
                        "num_keywords",
                        format!("must leave at least one non-keyword among {content} content tokens"),
                    ));
                }
            }
            _ => {}
        }
        if self.num_keywords > content {
            return Err(Error::config("num_keywords", format!("exceeds {content} content tokens")));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::synthetic(self.vocab_size, self.num_keywords)
    }

    pub fn keywords(&self) -> Vec<TokenId> {
        (NUM_SPECIAL..NUM_SPECIAL + self.num_keywords)
            .map(|t| t as TokenId)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: String,
    pub input: TokenSequence,
    pub reference: TokenSequence,
}

/// The subsequence of `input` whose tokens satisfy `is_keyword`, in order.
pub fn extract_keywords(input: &[TokenId], is_keyword: impl Fn(TokenId) -> bool) -> Vec<TokenId> {
    input.iter().copied().filter(|&t| is_keyword(t)).collect()
}

/// Generates `n` examples. Record `i` draws from its own stream derived from
/// `(spec.seed, i)`, so any shard of the corpus can be regenerated alone.
pub fn generate_corpus(spec: &TaskSpec, n: usize) -> Result<Vec<ExampleRecord>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::config("n", "must be at least 1"));
    }
    let vocab = spec.vocabulary()?;
    let content = vocab.content();
    let keywords = spec.keywords();
    let plain: Vec<TokenId> = content
        .iter()
        .copied()
        .filter(|t| !keywords.contains(t))
        .collect();
    let kind_key = hash_str(match spec.kind {
        TaskKind::Copy | TaskKind::NoisyParaphrase => "copy",
        TaskKind::KeywordExtract => "keyword-extract",
    });

    let records = (0..n)
        .map(|i| {
            let mut rng = Rng::child(spec.seed, &[kind_key, i as u64]);
            let (input, reference) = match spec.kind {
                TaskKind::Copy | TaskKind::NoisyParaphrase => {
                    let input: Vec<TokenId> =
                        (0..spec.input_len).map(|_| content[rng.index(content.len())]).collect();
                    let mut reference = input[..spec.output_len].to_vec();
                    if spec.kind == TaskKind::NoisyParaphrase {
                        for tok in reference.iter_mut() {
                            if rng.bernoulli(spec.noise_rate) {
                                *tok = content[rng.index(content.len())];
                            }
                        }
                    }
                    (input, reference)
                }
                TaskKind::KeywordExtract => {
                    let count = 1 + rng.index(spec.output_len);
                    let mut positions: Vec<usize> = (0..spec.input_len).collect();
                    rng.shuffle(&mut positions);
                    let chosen: HashSet<usize> = positions[..count].iter().copied().collect();
                    let input: Vec<TokenId> = (0..spec.input_len)
                        .map(|p| {
                            if chosen.contains(&p) {
                                keywords[rng.index(keywords.len())]
                            } else {
                                plain[rng.index(plain.len())]
                            }
                        })
                        .collect();
                    let reference = extract_keywords(&input, |t| keywords.contains(&t));
                    (input, reference)
                }
            };
            ExampleRecord {
                id: format!("ex{i:06}"),
                input: input.into(),
                reference: reference.into(),
            }
        })
        .collect();
    Ok(records)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<ExampleRecord>,
    pub dev: Vec<ExampleRecord>,
    pub test: Vec<ExampleRecord>,
}

/// Split sizes for `n` records: `floor(0.8 n)` train, `floor(0.1 n)` dev, the
/// remainder test.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 8 / 10;
    let dev = n / 10;
    (train, dev, n - train - dev)
}

/// Seeded shuffle into train/dev/test; each split keeps corpus order.
pub fn split_corpus(records: &[ExampleRecord], seed: u64) -> Splits {
    let mut order: Vec<usize> = (0..records.len()).collect();
    Rng::child(seed, &[hash_str("split")]).shuffle(&mut order);
    let (n_train, n_dev, _) = split_sizes(records.len());
    let take = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| records[i].clone()).collect::<Vec<_>>()
    };
    Splits {
        train: take(&order[..n_train]),
        dev: take(&order[n_train..n_train + n_dev]),
        test: take(&order[n_train + n_dev..]),
    }
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    input: Option<Vec<TokenId>>,
    reference: Option<Vec<TokenId>>,
}

/// Parses corpus JSONL. Blank lines are skipped; line numbers are 1-based.
pub fn parse_records(reader: impl BufRead) -> Result<Vec<ExampleRecord>> {
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let missing = |field: &str| Error::MissingField {
            line: line_no,
            field: field.to_string(),
        };
        let id = raw.id.ok_or_else(|| missing("id"))?;
        let input = raw.input.ok_or_else(|| missing("input"))?;
        let reference = raw.reference.ok_or_else(|| missing("reference"))?;
        if input.is_empty() || reference.is_empty() {
            return Err(Error::Validation(format!("line {line_no}: empty token sequence")));
        }
        if !ids.insert(id.clone()) {
            return Err(Error::Validation(format!("line {line_no}: duplicate id {id:?}")));
        }
        records.push(ExampleRecord {
            id,
            input: input.into(),
            reference: reference.into(),
        });
    }
    Ok(records)
}

pub fn read_records(path: &Path) -> Result<Vec<ExampleRecord>> {
    parse_records(BufReader::new(File::open(path)?))
}

pub fn format_records(records: &[ExampleRecord], mut w: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_records(records: &[ExampleRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    format_records(records, &mut w)?;
    w.flush()?;
    Ok(())
}
