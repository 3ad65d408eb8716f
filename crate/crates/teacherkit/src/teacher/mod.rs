//! Explanation generation: prompting a backend for chain-of-thought,
//! fundamentals, and common-mistakes text, with an optional
//! accept-or-rationalize gate on the chain of thought.
//!
//! The generation prompt for a sample is its rendered question/answer text
//! followed by one of three fixed suffixes ([`PromptKind::suffix`]). With the
//! gate enabled, a chain of thought is accepted only if its final
//! "the answer is (L)" statement names the gold letter; after `max_attempts`
//! failures one more generation is made with the gold answer spelled out in
//! a hint, and that one is kept with `rationalized` set.

pub mod http;
pub mod stub;

use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::{
    AugmentedSample, Backend, BackendError, Explanation, ExplanationKind, GenParams, Sample,
};
use crate::ingest::{option_letter, render, RenderError};

pub use http::HttpBackend;
pub use stub::{StubBehavior, StubServer};

/// The three explanation prompts. Each maps one-to-one onto an
/// [`ExplanationKind`] and contributes a fixed suffix string appended to the
/// rendered sample text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PromptKind {
    Cot,
    Fundamental,
    CommonMistakes,
}

impl PromptKind {
    pub const ALL: [PromptKind; 3] = [
        PromptKind::Cot,
        PromptKind::Fundamental,
        PromptKind::CommonMistakes,
    ];

    /// The exact suffix appended to the rendered text, byte for byte.
    pub fn suffix(&self) -> &'static str {
        match self {
            PromptKind::Cot => "Let's think step by step.",
            PromptKind::Fundamental => "The fundamental of this question is:",
            PromptKind::CommonMistakes => "The common mistakes are:",
        }
    }

    pub fn explanation_kind(&self) -> ExplanationKind {
        match self {
            PromptKind::Cot => ExplanationKind::Cot,
            PromptKind::Fundamental => ExplanationKind::Fundamental,
            PromptKind::CommonMistakes => ExplanationKind::CommonMistakes,
        }
    }

    pub fn from_kind(kind: ExplanationKind) -> PromptKind {
        match kind {
            ExplanationKind::Cot => PromptKind::Cot,
            ExplanationKind::Fundamental => PromptKind::Fundamental,
            ExplanationKind::CommonMistakes => PromptKind::CommonMistakes,
        }
    }
}

impl FromStr for PromptKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "cot" => Ok(PromptKind::Cot),
            "fundamental" => Ok(PromptKind::Fundamental),
            "mistakes" | "common_mistakes" => Ok(PromptKind::CommonMistakes),
            other => Err(format!(
                "unknown explanation kind {other:?} (expected cot, fundamental, or mistakes)"
            )),
        }
    }
}

/// Parses a comma-separated kind list such as "cot,fundamental,mistakes",
/// dropping duplicates while keeping first-mention order.
pub fn parse_kinds(list: &str) -> Result<Vec<PromptKind>, String> {
    let mut kinds = Vec::new();
    for part in list.split(',') {
        let kind: PromptKind = part.parse()?;
        if !kinds.contains(&kind) {
            kinds.push(kind);
        }
    }
    if kinds.is_empty() {
        return Err("empty kind list".into());
    }
    Ok(kinds)
}

/// Configuration for the accept-or-rationalize gate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StarConfig {
    pub enabled: bool,
    /// Unhinted generations allowed before falling back to the hint.
    pub max_attempts: u32,
    /// Sentence inserted after the question on the hinted attempt;
    /// "{answer}" expands to "(L) {option text}".
    pub hint_template: String,
}

impl Default for StarConfig {
    fn default() -> Self {
        StarConfig {
            enabled: false,
            max_attempts: 2,
            hint_template: "(Hint: the correct answer is {answer}.)".to_string(),
        }
    }
}

impl StarConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if self.enabled && self.max_attempts < 1 {
            return Err(AugmentError::Config("max_attempts must be >= 1".into()));
        }
        if self.enabled && !self.hint_template.contains("{answer}") {
            return Err(AugmentError::Config(
                "hint_template must contain {answer}".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("sample {0}: backend returned an empty generation")]
    EmptyGeneration(String),
    #[error("sample {0}: answer verifier needs options, sample is free-form")]
    VerifierInapplicable(String),
    #[error("invalid augment config: {0}")]
    Config(String),
}

/// One failed (sample, kind) pair from a corpus run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub id: String,
    pub kind: ExplanationKind,
    pub error: String,
}

/// Generates one explanation with no acceptance check.
pub fn augment_one(
    sample: &Sample,
    kind: PromptKind,
    backend: &dyn Backend,
    params: &GenParams,
) -> Result<Explanation, AugmentError> {
    let prompt = format!("{} {}", render(sample)?.full_text, kind.suffix());
    let text = backend.generate(&prompt, params)?.trim().to_string();
    if text.is_empty() {
        return Err(AugmentError::EmptyGeneration(sample.id.clone()));
    }
    Ok(Explanation {
        kind: kind.explanation_kind(),
        text,
        source: backend.backend_id(),
        attempts: 1,
        rationalized: false,
    })
}

/// The letter of the last "the answer is (L)" occurrence in `text`,
/// uppercased, if any. Matching is case-insensitive.
pub fn last_answer_letter(text: &str) -> Option<char> {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    let pattern = PATTERN
        .get_or_init(|| Regex::new(r"(?i)the answer is \(([a-z])\)").expect("fixed pattern"));
    pattern
        .captures_iter(text)
        .last()
        .map(|cap| cap[1].chars().next().expect("one-letter group").to_ascii_uppercase())
}

/// True when the last "the answer is (L)" occurrence in `text` names
/// `gold_letter`. Earlier occurrences are ignored since generations often
/// discuss wrong options before concluding.
pub fn verify_conclusion(text: &str, gold_letter: char) -> bool {
    last_answer_letter(text) == Some(gold_letter.to_ascii_uppercase())
}

/// Generates a chain of thought gated by the answer verifier.
///
/// Up to `cfg.max_attempts` unhinted generations are tried; the first one
/// whose conclusion names the gold letter is accepted. If none does, a final
/// generation is made with the hint inserted after the question and accepted
/// unconditionally with `rationalized = true`. `attempts` counts every
/// generation used, hinted included. When the caller passes a seed, attempt
/// k uses seed + k - 1 so a deterministic backend still varies per attempt.
pub fn star_filter(
    sample: &Sample,
    backend: &dyn Backend,
    params: &GenParams,
    cfg: &StarConfig,
) -> Result<Explanation, AugmentError> {
    cfg.validate()?;
    if !sample.is_multiple_choice() {
        return Err(AugmentError::VerifierInapplicable(sample.id.clone()));
    }
    let gold_index = sample.answer_index.expect("multiple-choice sample");
    let gold_letter = option_letter(gold_index).ok_or_else(|| {
        AugmentError::Render(RenderError::MoreThan26Options(sample.id.clone()))
    })?;

    let prompt = format!(
        "{} {}",
        render(sample)?.full_text,
        PromptKind::Cot.suffix()
    );
    for attempt in 1..=cfg.max_attempts {
        let text = backend
            .generate(&prompt, &attempt_params(params, attempt))?
            .trim()
            .to_string();
        if !text.is_empty() && verify_conclusion(&text, gold_letter) {
            return Ok(Explanation {
                kind: ExplanationKind::Cot,
                text,
                source: backend.backend_id(),
                attempts: attempt,
                rationalized: false,
            });
        }
    }

    let answer = format!("({gold_letter}) {}", sample.options[gold_index].trim());
    let hint = cfg.hint_template.replace("{answer}", &answer);
    let mut hinted = sample.clone();
    hinted.question = format!("{} {}", sample.question.trim(), hint);
    let hinted_prompt = format!(
        "{} {}",
        render(&hinted)?.full_text,
        PromptKind::Cot.suffix()
    );
    let attempts = cfg.max_attempts + 1;
    let text = backend
        .generate(&hinted_prompt, &attempt_params(params, attempts))?
        .trim()
        .to_string();
    if text.is_empty() {
        return Err(AugmentError::EmptyGeneration(sample.id.clone()));
    }
    Ok(Explanation {
        kind: ExplanationKind::Cot,
        text,
        source: backend.backend_id(),
        attempts,
        rationalized: true,
    })
}

fn attempt_params(params: &GenParams, attempt: u32) -> GenParams {
    let mut p = params.clone();
    p.seed = params.seed.map(|s| s.wrapping_add(u64::from(attempt) - 1));
    p
}

/// Augments every sample with every requested kind over a bounded worker
/// pool. Output order equals input order no matter how requests interleave;
/// failures land in the ledger and leave that kind absent on the sample.
///
/// The gate applies to chain-of-thought generation on multiple-choice
/// samples only; free-form samples fall back to ungated generation since
/// they have no gold letter to verify.
pub fn augment_corpus(
    samples: Vec<Sample>,
    kinds: &[PromptKind],
    backend: &dyn Backend,
    params: &GenParams,
    concurrency: usize,
    star: &StarConfig,
) -> Result<(Vec<AugmentedSample>, Vec<LedgerEntry>), AugmentError> {
    if concurrency < 1 {
        return Err(AugmentError::Config("concurrency must be >= 1".into()));
    }
    star.validate()?;

    let jobs: Vec<(usize, PromptKind)> = (0..samples.len())
        .flat_map(|i| kinds.iter().map(move |&k| (i, k)))
        .collect();
    let slots: Vec<OnceLock<Result<Explanation, AugmentError>>> =
        jobs.iter().map(|_| OnceLock::new()).collect();
    let next_job = AtomicUsize::new(0);

    let workers = concurrency.min(jobs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next_job.fetch_add(1, Ordering::SeqCst);
                let Some(&(sample_idx, kind)) = jobs.get(i) else {
                    break;
                };
                let sample = &samples[sample_idx];
                let outcome = if kind == PromptKind::Cot
                    && star.enabled
                    && sample.is_multiple_choice()
                {
                    star_filter(sample, backend, params, star)
                } else {
                    augment_one(sample, kind, backend, params)
                };
                let _ = slots[i].set(outcome);
            });
        }
    });

    let mut ledger = Vec::new();
    let mut augs: Vec<AugmentedSample> =
        samples.into_iter().map(AugmentedSample::new).collect();
    for (slot, &(sample_idx, kind)) in slots.into_iter().zip(&jobs) {
        let outcome = slot.into_inner().expect("every job ran");
        match outcome {
            Ok(explanation) => augs[sample_idx].attach(explanation),
            Err(error) => {
                log::warn!("augment failed: {error}");
                ledger.push(LedgerEntry {
                    id: augs[sample_idx].sample.id.clone(),
                    kind: kind.explanation_kind(),
                    error: error.to_string(),
                });
            }
        }
    }
    Ok((augs, ledger))
}
