//! Builds training texts by splicing explanation fields onto the rendered
//! question/answer text in a named order.
//!
//! A variant name spells out its field order: `C_M_F` appends the chain of
//! thought, then the common mistakes, then the fundamental, each introduced
//! by the same connective sentence used to prompt for it. `TEXT` is the bare
//! rendering and `SHUFFLE` picks one single-field variant per sample, keyed
//! on `(shuffle_seed, sample id)` so the pick survives corpus reordering.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::{AugmentedSample, ExplanationKind};
use crate::ingest::{render, RenderError};
use crate::seeded::keyed_rng;
use crate::teacher::PromptKind;

/// One explanation field, named by its variant letter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldKind {
    C,
    F,
    M,
}

impl FieldKind {
    pub fn letter(&self) -> &'static str {
        match self {
            FieldKind::C => "C",
            FieldKind::F => "F",
            FieldKind::M => "M",
        }
    }

    pub fn kind(&self) -> ExplanationKind {
        match self {
            FieldKind::C => ExplanationKind::Cot,
            FieldKind::F => ExplanationKind::Fundamental,
            FieldKind::M => ExplanationKind::CommonMistakes,
        }
    }

    /// The sentence that introduces this field, identical to the prompt
    /// suffix used to generate it.
    pub fn connective(&self) -> &'static str {
        PromptKind::from_kind(self.kind()).suffix()
    }
}

/// The eight supported compositions. Names list fields in splice order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[allow(non_camel_case_types)]
pub enum CompositionVariant {
    TEXT,
    C,
    C_M,
    C_M_F,
    M,
    F,
    F_C_M,
    SHUFFLE,
}

impl CompositionVariant {
    pub const ALL: [CompositionVariant; 8] = [
        CompositionVariant::TEXT,
        CompositionVariant::C,
        CompositionVariant::C_M,
        CompositionVariant::C_M_F,
        CompositionVariant::M,
        CompositionVariant::F,
        CompositionVariant::F_C_M,
        CompositionVariant::SHUFFLE,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CompositionVariant::TEXT => "TEXT",
            CompositionVariant::C => "C",
            CompositionVariant::C_M => "C_M",
            CompositionVariant::C_M_F => "C_M_F",
            CompositionVariant::M => "M",
            CompositionVariant::F => "F",
            CompositionVariant::F_C_M => "F_C_M",
            CompositionVariant::SHUFFLE => "SHUFFLE",
        }
    }

    /// Field order for the fixed variants; `None` for SHUFFLE, whose order
    /// is drawn per sample.
    pub fn fixed_order(&self) -> Option<&'static [FieldKind]> {
        use FieldKind::{C, F, M};
        match self {
            CompositionVariant::TEXT => Some(&[]),
            CompositionVariant::C => Some(&[C]),
            CompositionVariant::C_M => Some(&[C, M]),
            CompositionVariant::C_M_F => Some(&[C, M, F]),
            CompositionVariant::M => Some(&[M]),
            CompositionVariant::F => Some(&[F]),
            CompositionVariant::F_C_M => Some(&[F, C, M]),
            CompositionVariant::SHUFFLE => None,
        }
    }

    /// The order actually used for a given sample. For SHUFFLE this draws
    /// uniformly from {[C], [M], [F]}.
    pub fn effective_order(&self, sample_id: &str, shuffle_seed: u64) -> Vec<FieldKind> {
        match self.fixed_order() {
            Some(order) => order.to_vec(),
            None => {
                let singletons = [FieldKind::C, FieldKind::M, FieldKind::F];
                let pick = keyed_rng(shuffle_seed, sample_id).gen_range(0..singletons.len());
                vec![singletons[pick]]
            }
        }
    }
}

impl std::str::FromStr for CompositionVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CompositionVariant::ALL
            .iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .copied()
            .ok_or_else(|| {
                let names: Vec<&str> =
                    CompositionVariant::ALL.iter().map(|v| v.name()).collect();
                format!("unknown variant {s:?} (expected one of {})", names.join(", "))
            })
    }
}

impl std::fmt::Display for CompositionVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ComposeError {
    #[error("sample {id}: variant needs field {field} but no {kind} explanation is attached",
            field = field.letter(), kind = field.kind())]
    MissingExplanation { id: String, field: FieldKind },
    #[error(transparent)]
    Render(#[from] RenderError),
}

/// One composed training record, as written to composed.jsonl.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComposedRecord {
    pub id: String,
    pub variant: String,
    pub effective_order: Vec<String>,
    pub text: String,
}

/// A sample skipped by [`build_variant_corpus`] and why.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComposeSkip {
    pub id: String,
    pub error: String,
}

/// Composes one sample, returning the full record.
pub fn compose_record(
    aug: &AugmentedSample,
    variant: CompositionVariant,
    shuffle_seed: u64,
) -> Result<ComposedRecord, ComposeError> {
    let order = variant.effective_order(&aug.sample.id, shuffle_seed);
    let mut text = render(&aug.sample)?.full_text;
    for field in &order {
        let explanation = aug.explanation(field.kind()).ok_or_else(|| {
            ComposeError::MissingExplanation { id: aug.sample.id.clone(), field: *field }
        })?;
        text.push(' ');
        text.push_str(field.connective());
        text.push(' ');
        text.push_str(&explanation.text);
    }
    Ok(ComposedRecord {
        id: aug.sample.id.clone(),
        variant: variant.name().to_string(),
        effective_order: order.iter().map(|f| f.letter().to_string()).collect(),
        text,
    })
}

/// Composes one sample to bare text.
pub fn compose(
    aug: &AugmentedSample,
    variant: CompositionVariant,
    shuffle_seed: u64,
) -> Result<String, ComposeError> {
    Ok(compose_record(aug, variant, shuffle_seed)?.text)
}

/// Composes a corpus in input order. Samples that cannot be composed go to
/// the skip ledger instead of aborting the run.
pub fn build_variant_corpus(
    augs: &[AugmentedSample],
    variant: CompositionVariant,
    shuffle_seed: u64,
) -> (Vec<ComposedRecord>, Vec<ComposeSkip>) {
    let mut records = Vec::with_capacity(augs.len());
    let mut skips = Vec::new();
    for aug in augs {
        match compose_record(aug, variant, shuffle_seed) {
            Ok(record) => records.push(record),
            Err(error) => {
                log::warn!("compose skip: {error}");
                skips.push(ComposeSkip { id: aug.sample.id.clone(), error: error.to_string() });
            }
        }
    }
    (records, skips)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{Explanation, Sample, Split};
    use std::collections::HashMap;

    fn fixture() -> AugmentedSample {
        let sample = Sample {
            id: "boyle/0".into(),
            task: "science".into(),
            question: "Does pressure relate to volume?".into(),
            options: vec!["True".into(), "False".into()],
            answer_index: Some(0),
            answer_text: "True".into(),
            subject: None,
            split: Split::Unassigned,
        };
        let mut aug = AugmentedSample::new(sample);
        for (kind, text) in [
            (ExplanationKind::Cot, "Step 1: apply the law. Hence the statement is correct."),
            (ExplanationKind::Fundamental, "P is proportional to 1/V."),
            (ExplanationKind::CommonMistakes, "Do not confuse it with the temperature law."),
        ] {
            aug.attach(Explanation {
                kind,
                text: text.into(),
                source: "fixture".into(),
                attempts: 1,
                rationalized: false,
            });
        }
        aug
    }

    const BASE: &str =
        "Q: Does pressure relate to volume? (A) True (B) False A: The answer is (A).";

    #[test]
    fn text_variant_is_bare_rendering() {
        let record = compose_record(&fixture(), CompositionVariant::TEXT, 0).unwrap();
        assert_eq!(record.text, BASE);
        assert!(record.effective_order.is_empty());
        assert_eq!(record.variant, "TEXT");
    }

    #[test]
    fn single_field_variant_appends_connective_then_text() {
        let text = compose(&fixture(), CompositionVariant::F, 0).unwrap();
        assert_eq!(
            text,
            format!("{BASE} The fundamental of this question is: P is proportional to 1/V.")
        );
    }

    #[test]
    fn order_follows_variant_name() {
        let text = compose(&fixture(), CompositionVariant::C_M_F, 0).unwrap();
        let cot = text.find("Let's think step by step.").unwrap();
        let mistakes = text.find("The common mistakes are:").unwrap();
        let fundamental = text.find("The fundamental of this question is:").unwrap();
        assert!(cot < mistakes && mistakes < fundamental);
        let text = compose(&fixture(), CompositionVariant::F_C_M, 0).unwrap();
        let cot = text.find("Let's think step by step.").unwrap();
        let mistakes = text.find("The common mistakes are:").unwrap();
        let fundamental = text.find("The fundamental of this question is:").unwrap();
        assert!(fundamental < cot && cot < mistakes);
    }

    #[test]
    fn every_variant_starts_with_the_rendering() {
        for variant in CompositionVariant::ALL {
            let text = compose(&fixture(), variant, 17).unwrap();
            assert!(text.starts_with(BASE), "{variant}: {text}");
        }
    }

    #[test]
    fn connectives_appear_once_per_field_in_order() {
        let text = compose(&fixture(), CompositionVariant::C_M, 0).unwrap();
        assert_eq!(text.matches("Let's think step by step.").count(), 1);
        assert_eq!(text.matches("The common mistakes are:").count(), 1);
        assert_eq!(text.matches("The fundamental of this question is:").count(), 0);
    }

    #[test]
    fn missing_field_is_an_error() {
        let mut aug = fixture();
        aug.explanations.remove(&ExplanationKind::CommonMistakes);
        match compose(&aug, CompositionVariant::C_M, 0) {
            Err(ComposeError::MissingExplanation { id, field }) => {
                assert_eq!(id, "boyle/0");
                assert_eq!(field, FieldKind::M);
            }
            other => panic!("expected MissingExplanation, got {other:?}"),
        }
        // TEXT needs no fields, so it still works.
        assert!(compose(&aug, CompositionVariant::TEXT, 0).is_ok());
    }

    #[test]
    fn shuffle_is_deterministic_per_id_and_seed() {
        let aug = fixture();
        let a = compose(&aug, CompositionVariant::SHUFFLE, 7).unwrap();
        let b = compose(&aug, CompositionVariant::SHUFFLE, 7).unwrap();
        assert_eq!(a, b);
        // The pick equals one of the three single-field compositions.
        let singles: Vec<String> = [CompositionVariant::C, CompositionVariant::M, CompositionVariant::F]
            .iter()
            .map(|v| compose(&aug, *v, 7).unwrap())
            .collect();
        assert!(singles.contains(&a));
    }

    #[test]
    fn shuffle_spreads_roughly_uniformly() {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let n = 3000;
        for i in 0..n {
            let mut aug = fixture();
            aug.sample.id = format!("s{i}");
            let record = compose_record(&aug, CompositionVariant::SHUFFLE, 42).unwrap();
            *counts.entry(record.effective_order[0].clone()).or_default() += 1;
        }
        assert_eq!(counts.len(), 3);
        for (letter, count) in &counts {
            let share = *count as f64 / n as f64;
            assert!(
                (share - 1.0 / 3.0).abs() < 0.05,
                "{letter} drawn {share:.3} of the time"
            );
        }
    }

    #[test]
    fn shuffle_choice_survives_corpus_reordering() {
        let mut augs: Vec<AugmentedSample> = (0..10)
            .map(|i| {
                let mut aug = fixture();
                aug.sample.id = format!("s{i}");
                aug
            })
            .collect();
        let (forward, _) = build_variant_corpus(&augs, CompositionVariant::SHUFFLE, 3);
        augs.reverse();
        let (reversed, _) = build_variant_corpus(&augs, CompositionVariant::SHUFFLE, 3);
        for record in &forward {
            let twin = reversed.iter().find(|r| r.id == record.id).unwrap();
            assert_eq!(record, twin);
        }
    }

    #[test]
    fn corpus_skips_incomplete_samples_without_dropping_the_run() {
        let mut augs: Vec<AugmentedSample> = (0..5)
            .map(|i| {
                let mut aug = fixture();
                aug.sample.id = format!("s{i}");
                aug
            })
            .collect();
        augs[1].explanations.remove(&ExplanationKind::CommonMistakes);
        augs[3].explanations.remove(&ExplanationKind::CommonMistakes);
        let (records, skips) = build_variant_corpus(&augs, CompositionVariant::C_M, 0);
        assert_eq!(records.len(), 3);
        assert_eq!(skips.len(), 2);
        assert_eq!(skips[0].id, "s1");
        assert_eq!(skips[1].id, "s3");
        let (records, skips) = build_variant_corpus(&augs, CompositionVariant::TEXT, 0);
        assert_eq!(records.len(), 5, "TEXT never needs explanations");
        assert!(skips.is_empty());
    }

    #[test]
    fn variant_names_parse_case_insensitively() {
        assert_eq!("C_M_F".parse::<CompositionVariant>().unwrap(), CompositionVariant::C_M_F);
        assert_eq!("shuffle".parse::<CompositionVariant>().unwrap(), CompositionVariant::SHUFFLE);
        assert_eq!("text".parse::<CompositionVariant>().unwrap(), CompositionVariant::TEXT);
        assert!("C_F_M_X".parse::<CompositionVariant>().is_err());
    }

    #[test]
    fn variant_name_tokens_match_field_order() {
        for variant in CompositionVariant::ALL {
            let Some(order) = variant.fixed_order() else { continue };
            if variant == CompositionVariant::TEXT {
                assert!(order.is_empty());
                continue;
            }
            let name_tokens: Vec<&str> = variant.name().split('_').collect();
            let order_letters: Vec<&str> = order.iter().map(|f| f.letter()).collect();
            assert_eq!(name_tokens, order_letters, "{variant}");
        }
    }
}
