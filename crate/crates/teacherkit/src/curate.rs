//! Corpus curation: token-length filtering, per-task caps, split assignment.
//!
//! All random selection is keyed on `(seed, task)` through a counter-based
//! generator, so the subset chosen for one task never changes when other
//! tasks are added, removed, or reordered.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::{Sample, Split, TokenizerKind};
use crate::ingest::render;
use crate::seeded::keyed_rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationConfig {
    /// Samples must render to strictly fewer tokens than this to survive.
    pub max_tokens: usize,
    /// Per-task ceiling on sample count after filtering.
    pub per_task_cap: usize,
    pub seed: u64,
    pub tokenizer: TokenizerKind,
}

impl CurationConfig {
    pub fn validate(&self) -> Result<(), CurateError> {
        if self.max_tokens < 1 {
            return Err(CurateError::InvalidConfig("max_tokens must be >= 1".into()));
        }
        if self.per_task_cap < 1 {
            return Err(CurateError::InvalidConfig("per_task_cap must be >= 1".into()));
        }
        Ok(())
    }
}

/// Non-negative split weights, e.g. 8:1:1. Normalized by their sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: u32,
    pub validation: u32,
    pub test: u32,
}

impl SplitRatios {
    pub fn new(train: u32, validation: u32, test: u32) -> Result<Self, CurateError> {
        if train as u64 + validation as u64 + test as u64 == 0 {
            return Err(CurateError::InvalidRatios("weights sum to zero".into()));
        }
        Ok(SplitRatios { train, validation, test })
    }

    /// Split sizes for `n` samples: train and validation get the floor of
    /// their share, the remainder goes to test.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let total = (self.train + self.validation + self.test) as u128;
        let train = (n as u128 * self.train as u128 / total) as usize;
        let validation = (n as u128 * self.validation as u128 / total) as usize;
        (train, validation, n - train - validation)
    }
}

impl std::str::FromStr for SplitRatios {
    type Err = CurateError;

    /// Parses "8:1:1"-style weight triples.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(CurateError::InvalidRatios(format!(
                "expected three colon-separated weights, got {s:?}"
            )));
        }
        let mut weights = [0u32; 3];
        for (slot, part) in weights.iter_mut().zip(&parts) {
            *slot = part
                .trim()
                .parse()
                .map_err(|_| CurateError::InvalidRatios(format!("bad weight {part:?} in {s:?}")))?;
        }
        SplitRatios::new(weights[0], weights[1], weights[2])
    }
}

impl std::fmt::Display for SplitRatios {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}:{}", self.train, self.validation, self.test)
    }
}

#[derive(Debug, Error)]
pub enum CurateError {
    #[error("sample {0} already has a split assigned")]
    AlreadySplit(String),
    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),
    #[error("invalid curation config: {0}")]
    InvalidConfig(String),
}

/// Per-task bookkeeping for the curation report.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCuration {
    pub input: usize,
    pub kept: usize,
    pub dropped_tokens: usize,
    pub dropped_cap: usize,
}

pub type CurationReport = BTreeMap<String, TaskCuration>;

/// Keeps samples whose rendered text is strictly shorter than
/// `cfg.max_tokens` tokens. Returns kept samples in input order plus the
/// per-task drop count. Samples that fail to render are dropped and counted
/// the same way.
pub fn filter_by_tokens(
    samples: Vec<Sample>,
    cfg: &CurationConfig,
) -> (Vec<Sample>, BTreeMap<String, usize>) {
    let tokenizer = cfg.tokenizer.create();
    let mut kept = Vec::with_capacity(samples.len());
    let mut dropped: BTreeMap<String, usize> = BTreeMap::new();
    for sample in samples {
        let n_tokens = match render(&sample) {
            Ok(r) => tokenizer.encode(&r.full_text).len(),
            Err(e) => {
                log::warn!("dropping unrenderable sample: {e}");
                *dropped.entry(sample.task.clone()).or_default() += 1;
                continue;
            }
        };
        if n_tokens < cfg.max_tokens {
            kept.push(sample);
        } else {
            *dropped.entry(sample.task.clone()).or_default() += 1;
        }
    }
    (kept, dropped)
}

/// Caps each task at `cfg.per_task_cap` samples. Oversized tasks keep a
/// uniform subset picked by a shuffle seeded on `(seed, task)`; the output
/// preserves the input's relative order.
pub fn balance_per_task(samples: Vec<Sample>, cfg: &CurationConfig) -> Vec<Sample> {
    let mut by_task: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, sample) in samples.iter().enumerate() {
        by_task.entry(&sample.task).or_default().push(i);
    }

    let mut keep = vec![true; samples.len()];
    for (task, positions) in by_task {
        if positions.len() <= cfg.per_task_cap {
            continue;
        }
        let mut order: Vec<usize> = (0..positions.len()).collect();
        order.shuffle(&mut keyed_rng(cfg.seed, task));
        for &p in &order[cfg.per_task_cap..] {
            keep[positions[p]] = false;
        }
    }

    samples
        .into_iter()
        .zip(keep)
        .filter_map(|(sample, kept)| kept.then_some(sample))
        .collect()
}

/// Assigns train/validation/test labels by a seeded shuffle. Sample order is
/// unchanged; only the `split` field is written.
pub fn split(
    samples: Vec<Sample>,
    ratios: &SplitRatios,
    seed: u64,
) -> Result<Vec<Sample>, CurateError> {
    for sample in &samples {
        if sample.split != Split::Unassigned {
            return Err(CurateError::AlreadySplit(sample.id.clone()));
        }
    }
    let (n_train, n_validation, _) = ratios.sizes(samples.len());

    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut keyed_rng(seed, "split"));

    let mut assignment = vec![Split::Test; samples.len()];
    for (rank, &i) in order.iter().enumerate() {
        assignment[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_validation {
            Split::Validation
        } else {
            Split::Test
        };
    }

    Ok(samples
        .into_iter()
        .zip(assignment)
        .map(|(mut sample, split)| {
            sample.split = split;
            sample
        })
        .collect())
}

/// Full curation pass: token filter, per-task cap, optional split. Returns
/// the surviving samples and the per-task report.
pub fn curate(
    samples: Vec<Sample>,
    cfg: &CurationConfig,
    ratios: Option<&SplitRatios>,
) -> Result<(Vec<Sample>, CurationReport), CurateError> {
    cfg.validate()?;

    let mut report: CurationReport = BTreeMap::new();
    for sample in &samples {
        report.entry(sample.task.clone()).or_default().input += 1;
    }

    let (filtered, dropped_tokens) = filter_by_tokens(samples, cfg);
    for (task, n) in dropped_tokens {
        report.entry(task).or_default().dropped_tokens = n;
    }

    let balanced = balance_per_task(filtered, cfg);
    for sample in &balanced {
        report.entry(sample.task.clone()).or_default().kept += 1;
    }
    for entry in report.values_mut() {
        entry.dropped_cap = entry.input - entry.kept - entry.dropped_tokens;
    }

    let out = match ratios {
        Some(r) => split(balanced, r, cfg.seed)?,
        None => balanced,
    };
    Ok((out, report))
}
