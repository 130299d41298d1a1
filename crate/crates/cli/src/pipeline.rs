//! The four pipeline stages. Each reads its inputs from and writes its
//! outputs under the run's output directory.

use std::fs;
use std::path::PathBuf;

use log::info;

use seqcal::corpus::{generate_corpus, read_records, split_corpus, write_records, Vocabulary};
use seqcal::inference::{decode_corpus, write_predictions};
use seqcal::model::{train, Method, ModelBundle};
use seqcal::{Error, Result};

use crate::config::RunConfig;
use crate::report::{self, EvalReport};

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

/// Writes the vocabulary and the train/dev/test splits.
pub fn gen_data(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let vocab = config.task.vocabulary()?;
    let corpus = generate_corpus(&config.task, config.examples)?;
    let splits = split_corpus(&corpus, config.seed);
    fs::create_dir_all(config.data_dir())?;
    let vocab_path = config.vocab_path();
    if let Some(parent) = vocab_path.parent() {
        fs::create_dir_all(parent)?;
    }
    vocab.write(&vocab_path)?;
    let mut written = vec![vocab_path];
    for (name, records) in SPLITS.iter().zip([&splits.train, &splits.dev, &splits.test]) {
        let path = config.split_path(name);
        write_records(records, &path)?;
        info!("wrote {} records to {}", records.len(), path.display());
        written.push(path);
    }
    Ok(written)
}

fn load_vocab(config: &RunConfig) -> Result<Vocabulary> {
    let path = config.vocab_path();
    if !path.exists() {
        return Err(Error::Validation(format!(
            "vocabulary {} not found; run gen-data first",
            path.display()
        )));
    }
    Vocabulary::read(&path)
}

fn load_split(config: &RunConfig, split: &str) -> Result<Vec<seqcal::corpus::ExampleRecord>> {
    let path = config.split_path(split);
    if !path.exists() {
        return Err(Error::Validation(format!("{} not found; run gen-data first", path.display())));
    }
    let records = read_records(&path)?;
    Ok(records)
}

/// Trains `method` on the training split and saves its bundle.
pub fn train_method(config: &RunConfig, method: Method) -> Result<Vec<PathBuf>> {
    let vocab = load_vocab(config)?;
    let corpus = load_split(config, "train")?;
    for r in &corpus {
        r.input.validate(&vocab)?;
        r.reference.validate(&vocab)?;
    }
    let method_config = config.method_config(method)?;
    info!("training {method} ({} networks)", method_config.seeds.len());
    let trained = train(&corpus, &vocab, &method_config, &config.train)?;
    for (seed, losses) in method_config.seeds.iter().zip(&trained.losses) {
        if let Some(last) = losses.last() {
            info!("{method} seed {seed}: final loss {last:.5}");
        }
    }
    trained.bundle.save(&config.model_dir(method))
}

/// Decodes the test split with the saved bundle of `method`.
pub fn infer_method(config: &RunConfig, method: Method) -> Result<PathBuf> {
    let vocab = load_vocab(config)?;
    let dir = config.model_dir(method);
    if !dir.join("manifest.json").exists() {
        return Err(Error::Validation(format!("no trained model in {}", dir.display())));
    }
    let bundle = ModelBundle::load(&dir)?;
    bundle.check_vocabulary(&vocab)?;
    if bundle.config.method != method {
        return Err(Error::Validation(format!(
            "{} holds a {} model, not {method}",
            dir.display(),
            bundle.config.method
        )));
    }
    let test = load_split(config, "test")?;
    info!("decoding {} test examples with {method}", test.len());
    let predictions = decode_corpus(&bundle, &test, &config.posterior, config.seed)?;
    let path = config.predictions_path(method);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    write_predictions(&predictions, &path)?;
    Ok(path)
}

/// Scores every configured method with predictions on disk and writes the
/// report tables.
pub fn eval(config: &RunConfig, methods: &[Method]) -> Result<EvalReport> {
    let vocab = load_vocab(config)?;
    let test = load_split(config, "test")?;
    let report = report::evaluate(config, methods, &vocab, &test)?;
    report.write(config, &config.report_dir())?;
    Ok(report)
}

/// Every stage for every configured method.
pub fn run_all(config: &RunConfig) -> Result<EvalReport> {
    gen_data(config)?;
    for &m in &config.methods {
        train_method(config, m)?;
        infer_method(config, m)?;
    }
    eval(config, &config.methods)
}
