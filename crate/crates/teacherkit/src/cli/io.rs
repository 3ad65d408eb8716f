//! Artifact file formats shared by the subcommands.
//!
//! Every artifact is JSONL or JSON, written with LF endings and serde's
//! deterministic field order so identical inputs produce identical bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::core::{AugmentedSample, Explanation, ExplanationKind, Sample};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Record { path: String, line: usize, message: String },
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File { path: path.display().to_string(), source }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let file = File::open(path).map_err(file_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(file_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| IoError::Record {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), IoError> {
    let file = File::create(path).map_err(file_err(path))?;
    let mut writer = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("artifact types serialize");
        writeln!(writer, "{line}").map_err(file_err(path))?;
    }
    writer.flush().map_err(file_err(path))
}

pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(value).expect("artifact types serialize");
    std::fs::write(path, text + "\n").map_err(file_err(path))
}

pub fn sha256_file(path: &Path) -> Result<String, IoError> {
    let mut file = File::open(path).map_err(file_err(path))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf).map_err(file_err(path))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    let digest: [u8; 32] = hasher.finalize().into();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// One augmented.jsonl line: the sample's own fields plus its explanations.
/// The generation source is bookkeeping, not data, and stays off the wire;
/// reading it back yields an empty source.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentedRecord {
    #[serde(flatten)]
    pub sample: Sample,
    #[serde(default)]
    pub explanations: BTreeMap<ExplanationKind, WireExplanation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireExplanation {
    pub text: String,
    pub attempts: u32,
    pub rationalized: bool,
}

impl From<&AugmentedSample> for AugmentedRecord {
    fn from(aug: &AugmentedSample) -> Self {
        AugmentedRecord {
            sample: aug.sample.clone(),
            explanations: aug
                .explanations
                .iter()
                .map(|(kind, e)| {
                    (*kind, WireExplanation {
                        text: e.text.clone(),
                        attempts: e.attempts,
                        rationalized: e.rationalized,
                    })
                })
                .collect(),
        }
    }
}

impl From<AugmentedRecord> for AugmentedSample {
    fn from(record: AugmentedRecord) -> Self {
        let mut aug = AugmentedSample::new(record.sample);
        for (kind, wire) in record.explanations {
            aug.attach(Explanation {
                kind,
                text: wire.text,
                source: String::new(),
                attempts: wire.attempts,
                rationalized: wire.rationalized,
            });
        }
        aug
    }
}

pub fn write_augmented(path: &Path, augs: &[AugmentedSample]) -> Result<(), IoError> {
    let records: Vec<AugmentedRecord> = augs.iter().map(AugmentedRecord::from).collect();
    write_jsonl(path, &records)
}

pub fn read_augmented(path: &Path) -> Result<Vec<AugmentedSample>, IoError> {
    Ok(read_jsonl::<AugmentedRecord>(path)?.into_iter().map(AugmentedSample::from).collect())
}
