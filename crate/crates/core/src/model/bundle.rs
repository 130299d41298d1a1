//! On-disk model bundles: one JSON file per trained network plus a manifest.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};

use super::{MethodConfig, Network, OutputHead};

pub const BUNDLE_VERSION: u32 = 1;
const FORMAT: &str = "seqcal-model";
const MANIFEST: &str = "manifest.json";

/// Every network a method needs at inference time.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: MethodConfig,
    pub vocab_fingerprint: String,
    pub members: Vec<Network>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub seed: u64,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub method: super::Method,
    pub vocab_fingerprint: String,
    pub members: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct MemberFile {
    format: String,
    version: u32,
    config: MethodConfig,
    vocab_fingerprint: String,
    member_index: usize,
    seed: u64,
    network: Network,
}

fn check_header(format: &str, version: u32, path: &Path) -> Result<()> {
    if format != FORMAT {
        return Err(Error::Validation(format!("{}: not a model bundle ({format:?})", path.display())));
    }
    if version != BUNDLE_VERSION {
        return Err(Error::Validation(format!(
            "{}: bundle version {version}, expected {BUNDLE_VERSION}",
            path.display()
        )));
    }
    Ok(())
}

impl ModelBundle {
    pub fn check_vocabulary(&self, vocab: &Vocabulary) -> Result<()> {
        let fp = vocab.fingerprint();
        if fp != self.vocab_fingerprint {
            return Err(Error::Validation(format!(
                "vocabulary hash mismatch: bundle {} vs corpus {fp}",
                self.vocab_fingerprint
            )));
        }
        Ok(())
    }

    /// Writes `member-<i>.json` for every network and `manifest.json` into
    /// `dir`, returning the member file paths.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        let mut paths = Vec::new();
        for (i, (network, &seed)) in self.members.iter().zip(&self.config.seeds).enumerate() {
            let file = format!("member-{i}.json");
            let path = dir.join(&file);
            let record = MemberFile {
                format: FORMAT.into(),
                version: BUNDLE_VERSION,
                config: self.config.clone(),
                vocab_fingerprint: self.vocab_fingerprint.clone(),
                member_index: i,
                seed,
                network: network.clone(),
            };
            write_json(&path, &record)?;
            entries.push(ManifestEntry { seed, file });
            paths.push(path);
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: BUNDLE_VERSION,
            method: self.config.method,
            vocab_fingerprint: self.vocab_fingerprint.clone(),
            members: entries,
        };
        write_json(&dir.join(MANIFEST), &manifest)?;
        Ok(paths)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST);
        let manifest: Manifest = read_json(&manifest_path)?;
        check_header(&manifest.format, manifest.version, &manifest_path)?;
        if manifest.members.is_empty() {
            return Err(Error::Validation(format!("{}: no members", manifest_path.display())));
        }
        let mut config: Option<MethodConfig> = None;
        let mut members = Vec::new();
        for (i, entry) in manifest.members.iter().enumerate() {
            let path = dir.join(&entry.file);
            let file: MemberFile = read_json(&path)?;
            check_header(&file.format, file.version, &path)?;
            if file.member_index != i || file.seed != entry.seed {
                return Err(Error::Validation(format!(
                    "{}: member index/seed disagree with manifest",
                    path.display()
                )));
            }
            if file.vocab_fingerprint != manifest.vocab_fingerprint {
                return Err(Error::Validation(format!("{}: vocabulary hash differs", path.display())));
            }
            match &config {
                Some(c) if *c != file.config => {
                    return Err(Error::Validation(format!("{}: method config differs", path.display())));
                }
                None => config = Some(file.config),
                _ => {}
            }
            let mut network = file.network;
            network.validate()?;
            if let OutputHead::Gp(state) = &mut network.head {
                if state.covariance_valid {
                    state.finalize()?;
                }
            }
            members.push(network);
        }
        let config = config.expect("at least one member");
        config.validate()?;
        if config.method != manifest.method || config.seeds.len() != members.len() {
            return Err(Error::Validation(format!(
                "{}: manifest disagrees with member configs",
                manifest_path.display()
            )));
        }
        Ok(Self {
            config,
            vocab_fingerprint: manifest.vocab_fingerprint,
            members,
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path)?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| {
        Error::Validation(format!("{}: {e}", path.display()))
    })
}
