//! Shared domain types: samples, explanations, tokenizers, and backends.

mod backend;
mod tokenizer;

pub use backend::{Backend, BackendError, GenParams, MockBackend};
pub(crate) use backend::short_hash;
pub use tokenizer::{
    ByteTokenizer, TokenId, Tokenizer, TokenizerError, TokenizerKind, WhitespaceTokenizer,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which pipeline split a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
    #[default]
    Unassigned,
}

/// One unit of supervised data, either multiple-choice or free-form.
///
/// Multiple-choice samples carry a non-empty `options` list and an
/// `answer_index` into it; free-form samples have no options and answer with
/// `answer_text` alone. [`Sample::validate`] checks that a value is in one of
/// those two shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub task: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_index: Option<usize>,
    pub answer_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(default)]
    pub split: Split,
}

#[derive(Debug, Error)]
#[error("sample {id}: {reason}")]
pub struct InvariantViolation {
    pub id: String,
    pub reason: String,
}

impl Sample {
    /// True when the sample has answer options to choose between.
    pub fn is_multiple_choice(&self) -> bool {
        !self.options.is_empty()
    }

    pub fn validate(&self) -> Result<(), InvariantViolation> {
        let fail = |reason: &str| {
            Err(InvariantViolation {
                id: self.id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.id.is_empty() {
            return fail("id is empty");
        }
        if self.task.is_empty() {
            return fail("task is empty");
        }
        if self.options.is_empty() {
            if self.answer_index.is_some() {
                return fail("answer_index present without options");
            }
            if self.answer_text.is_empty() {
                return fail("free-form sample with empty answer_text");
            }
        } else {
            match self.answer_index {
                None => return fail("options present without answer_index"),
                Some(i) if i >= self.options.len() => {
                    return fail(&format!(
                        "answer_index {i} out of range for {} options",
                        self.options.len()
                    ));
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

/// The kinds of explanation a teacher model is asked to produce.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum ExplanationKind {
    Cot,
    Fundamental,
    CommonMistakes,
}

impl ExplanationKind {
    pub const ALL: [ExplanationKind; 3] = [
        ExplanationKind::Cot,
        ExplanationKind::Fundamental,
        ExplanationKind::CommonMistakes,
    ];

    /// The wire and config name ("cot", "fundamental", "common_mistakes").
    pub fn name(&self) -> &'static str {
        match self {
            ExplanationKind::Cot => "cot",
            ExplanationKind::Fundamental => "fundamental",
            ExplanationKind::CommonMistakes => "common_mistakes",
        }
    }
}

impl std::fmt::Display for ExplanationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One teacher-produced explanation attached to a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub kind: ExplanationKind,
    pub text: String,
    /// Identifier of the backend that produced the text.
    pub source: String,
    /// Total generation calls spent on this explanation, hinted retries
    /// included. Always at least 1.
    pub attempts: u32,
    /// True when the accepted text was produced with the gold answer given
    /// as a hint. Only ever set on chain-of-thought explanations.
    pub rationalized: bool,
}

impl Explanation {
    pub fn validate(&self) -> Result<(), String> {
        if self.text.is_empty() {
            return Err("explanation text is empty".into());
        }
        if self.attempts < 1 {
            return Err("attempts must be >= 1".into());
        }
        if self.rationalized && self.kind != ExplanationKind::Cot {
            return Err(format!("rationalized {} explanation", self.kind));
        }
        Ok(())
    }
}

/// A sample together with its explanations, at most one per kind.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub sample: Sample,
    pub explanations: BTreeMap<ExplanationKind, Explanation>,
}

impl AugmentedSample {
    pub fn new(sample: Sample) -> Self {
        AugmentedSample {
            sample,
            explanations: BTreeMap::new(),
        }
    }

    /// Attaches an explanation under its own kind. Replaces any previous
    /// explanation of the same kind.
    pub fn attach(&mut self, explanation: Explanation) {
        self.explanations.insert(explanation.kind, explanation);
    }

    pub fn explanation(&self, kind: ExplanationKind) -> Option<&Explanation> {
        self.explanations.get(&kind)
    }
}
