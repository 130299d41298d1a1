//! Run configuration: one TOML file describes data, methods, training,
//! decoding and evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use seqcal::calib::{default_alphas, EceConfig, RocConfig};
use seqcal::corpus::TaskSpec;
use seqcal::inference::PosteriorConfig;
use seqcal::model::{Method, MethodConfig, SngpConfig, TrainHyper};
use seqcal::rng::derive_seed;
use seqcal::{Error, Result};

/// Per-method settings. The `[method]` table sets them for every method and
/// `[overrides.<name>]` replaces individual keys for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodSettings {
    pub samples: usize,
    pub dropout_rate: f64,
    pub be_size: usize,
    /// Networks per deep ensemble.
    pub members: usize,
    pub sngp: SngpConfig,
}

impl Default for MethodSettings {
    fn default() -> Self {
        Self {
            samples: 10,
            dropout_rate: 0.1,
            be_size: 5,
            members: 10,
            sngp: SngpConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbstentionConfig {
    pub alphas: Vec<f64>,
}

impl Default for AbstentionConfig {
    fn default() -> Self {
        Self { alphas: default_alphas() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub resamples: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { resamples: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Corpus size before splitting.
    pub examples: usize,
    /// Vocabulary file; defaults to `<out_dir>/data/vocab.json`.
    #[serde(default)]
    pub vocab: Option<PathBuf>,
    pub methods: Vec<Method>,
    pub task: TaskSpec,
    #[serde(default)]
    pub train: TrainHyper,
    #[serde(default)]
    pub posterior: PosteriorConfig,
    #[serde(default)]
    pub ece: EceConfig,
    #[serde(default)]
    pub roc: RocConfig,
    #[serde(default)]
    pub abstention: AbstentionConfig,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
    #[serde(default)]
    pub method: toml::Table,
    #[serde(default)]
    pub overrides: BTreeMap<Method, toml::Table>,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::config("config", e.to_string().trim_end().to_owned()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::parse(&text)?;
        config.apply(overrides);
        Ok(config)
    }

    /// `--seed` replaces both the global seed and the corpus seed, so each
    /// seed is an independent replicate of the whole experiment.
    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(seed) = overrides.seed {
            self.seed = seed;
            self.task.seed = seed;
        }
        if let Some(dir) = &overrides.out_dir {
            self.out_dir = dir.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.examples == 0 {
            return Err(Error::config("examples", "must be at least 1"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("methods", "list at least one method"));
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return Err(Error::config("methods", "duplicate method"));
        }
        self.train.validate()?;
        self.posterior.validate()?;
        self.ece.validate()?;
        self.roc.validate()?;
        for (i, &a) in self.abstention.alphas.iter().enumerate() {
            if !(0.0..1.0).contains(&a) || (i > 0 && a < self.abstention.alphas[i - 1]) {
                return Err(Error::config("abstention.alphas", "must be sorted values in [0, 1)"));
            }
        }
        if self.bootstrap.resamples < 2 {
            return Err(Error::config("bootstrap.resamples", "must be at least 2"));
        }
        for &m in &self.methods {
            self.method_config(m)?;
        }
        Ok(())
    }

    pub fn settings(&self, method: Method) -> Result<MethodSettings> {
        let mut table = self.method.clone();
        if let Some(extra) = self.overrides.get(&method) {
            for (key, value) in extra {
                match (table.get_mut(key), value) {
                    (Some(toml::Value::Table(base)), toml::Value::Table(patch)) => {
                        base.extend(patch.clone());
                    }
                    _ => {
                        table.insert(key.clone(), value.clone());
                    }
                }
            }
        }
        MethodSettings::deserialize(toml::Value::Table(table))
            .map_err(|e| Error::config(format!("method.{method}"), e.to_string().trim_end().to_owned()))
    }

    /// Training seeds: network `i` of any method uses `derive(seed, i)`, so
    /// the base model and the first deep-ensemble member coincide.
    pub fn method_config(&self, method: Method) -> Result<MethodConfig> {
        let s = self.settings(method)?;
        let count = if method.is_deep_ensemble() { s.members } else { 1 };
        let seeds = (0..count as u64).map(|i| derive_seed(self.seed, &[i])).collect();
        let config = MethodConfig {
            method,
            samples: s.samples,
            dropout_rate: s.dropout_rate,
            be_size: s.be_size,
            sngp: s.sngp,
            seeds,
        };
        config.validate().map_err(|e| match e {
            Error::Config { field, reason } => Error::config(format!("method.{method}.{field}"), reason),
            other => other,
        })?;
        Ok(config)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn split_path(&self, split: &str) -> PathBuf {
        self.data_dir().join(format!("{split}.jsonl"))
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.vocab.clone().unwrap_or_else(|| self.data_dir().join("vocab.json"))
    }

    pub fn model_dir(&self, method: Method) -> PathBuf {
        self.out_dir.join("models").join(method.name())
    }

    pub fn predictions_path(&self, method: Method) -> PathBuf {
        self.out_dir.join("predictions").join(format!("{}.jsonl", method.name()))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.out_dir.join("reports")
    }
}
