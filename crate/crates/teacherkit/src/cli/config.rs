//! Pipeline configuration file.
//!
//! TOML with one table per stage. Unknown keys are rejected everywhere so a
//! typo fails fast instead of silently running defaults. Optional tables
//! fall back to their stage defaults; `[eval]` additionally has an `enabled`
//! switch because evaluation needs a live endpoint.

use serde::{Deserialize, Serialize};

use crate::compose::CompositionVariant;
use crate::core::TokenizerKind;
use crate::curate::SplitRatios;
use crate::eval::CandidateForm;
use crate::pack::OverlongPolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub ingest: IngestSection,
    #[serde(default)]
    pub curate: CurateSection,
    #[serde(default)]
    pub augment: AugmentSection,
    #[serde(default)]
    pub compose: ComposeSection,
    #[serde(default)]
    pub pack: PackSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub report: ReportSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    /// Input corpus: samples.jsonl, or a CSV directory when `ingest.format`
    /// says so.
    pub input: std::path::PathBuf,
    pub out_dir: std::path::PathBuf,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub tokenizer: TokenizerKind,
    /// Generation/scoring endpoint. Falls back to TEACHERKIT_ENDPOINT.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
}

fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct IngestSection {
    pub format: IngestFormat,
    pub strict: bool,
}

impl Default for IngestSection {
    fn default() -> Self {
        IngestSection { format: IngestFormat::Jsonl, strict: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IngestFormat {
    Jsonl,
    MmluCsv,
}

impl std::str::FromStr for IngestFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(IngestFormat::Jsonl),
            "mmlu-csv" | "mmlu_csv" => Ok(IngestFormat::MmluCsv),
            other => Err(format!("unknown ingest format {other:?} (expected jsonl or mmlu-csv)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct CurateSection {
    pub cap: usize,
    pub max_tokens: usize,
    /// "8:1:1"-style ratio; omit to leave samples unsplit.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitRatiosField>,
}

impl Default for CurateSection {
    fn default() -> Self {
        CurateSection { cap: 3000, max_tokens: 1200, split: Some(SplitRatiosField(SplitRatios::new(8, 1, 1).expect("static ratios"))) }
    }
}

/// SplitRatios carried as its "a:b:c" string form in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitRatiosField(pub SplitRatios);

impl Serialize for SplitRatiosField {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0.to_string())
    }
}

impl<'de> Deserialize<'de> for SplitRatiosField {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map(SplitRatiosField).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct AugmentSection {
    /// Comma list: cot, fundamental, mistakes.
    pub kinds: String,
    pub concurrency: usize,
    pub star: bool,
    pub max_attempts: u32,
    pub max_new_tokens: u32,
    pub temperature: f64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection {
            kinds: "cot,fundamental,mistakes".into(),
            concurrency: 8,
            star: false,
            max_attempts: 2,
            max_new_tokens: 512,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct ComposeSection {
    pub variant: CompositionVariant,
    pub shuffle_seed: u64,
}

impl Default for ComposeSection {
    fn default() -> Self {
        ComposeSection { variant: CompositionVariant::C_M_F, shuffle_seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct PackSection {
    pub max_len: usize,
    /// Packing tokenizer; byte is lossless on arbitrary text.
    pub tokenizer: TokenizerKind,
    pub pad_final: bool,
    pub on_overlong: OverlongPolicy,
    pub training_hints: Vec<String>,
}

impl Default for PackSection {
    fn default() -> Self {
        PackSection {
            max_len: 2048,
            tokenizer: TokenizerKind::Byte,
            pad_final: false,
            on_overlong: OverlongPolicy::Error,
            training_hints: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct EvalSection {
    pub enabled: bool,
    pub subject_prefix: bool,
    pub candidate_form: CandidateForm,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { enabled: false, subject_prefix: false, candidate_form: CandidateForm::Sentence }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct ReportSection {
    pub formats: Vec<ReportFormatField>,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection { formats: vec![ReportFormatField(crate::report::ReportFormat::Markdown)] }
    }
}

/// ReportFormat carried as "md"/"csv" strings in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReportFormatField(pub crate::report::ReportFormat);

impl Serialize for ReportFormatField {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(match self.0 {
            crate::report::ReportFormat::Markdown => "md",
            crate::report::ReportFormat::Csv => "csv",
        })
    }
}

impl<'de> Deserialize<'de> for ReportFormatField {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map(ReportFormatField).map_err(serde::de::Error::custom)
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Cross-field checks beyond what serde enforces.
    pub fn validate(&self) -> Result<(), String> {
        if self.curate.cap == 0 {
            return Err("curate.cap must be >= 1".into());
        }
        if self.curate.max_tokens == 0 {
            return Err("curate.max_tokens must be >= 1".into());
        }
        if self.augment.concurrency == 0 {
            return Err("augment.concurrency must be >= 1".into());
        }
        if self.pack.max_len < 2 {
            return Err("pack.max_len must be >= 2".into());
        }
        crate::teacher::parse_kinds(&self.augment.kinds)?;
        Ok(())
    }
}
