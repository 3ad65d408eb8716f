//! Dataset readers and the canonical question/answer text rendering.
//!
//! Every sample, multiple-choice or free-form, renders to a single line of
//! text:
//!
//! ```text
//! Q: {question} (A) {opt} (B) {opt} A: The answer is (L).   multiple-choice
//! Q: {question} A: {answer_text}                            free-form
//! ```
//!
//! Field contents are kept verbatim apart from trimming outer whitespace, so
//! segments are always joined by exactly one space.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::{InvariantViolation, Sample, Split};

/// A sample flattened into prompt and answer text.
///
/// `prompt_text` runs up to and including the `"A:"` marker; `answer_render`
/// is the gold continuation; `full_text` is the two joined by one space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedSample {
    pub id: String,
    pub prompt_text: String,
    pub answer_render: String,
    pub full_text: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RenderError {
    #[error("sample {0}: question is empty")]
    EmptyQuestion(String),
    #[error("sample {0}: more than 26 options, letters exhausted")]
    MoreThan26Options(String),
    #[error("sample {id}: {reason}")]
    InvalidSample { id: String, reason: String },
}

/// Uppercase letter for an option position: 0 → 'A', 25 → 'Z'.
pub(crate) fn option_letter(index: usize) -> Option<char> {
    if index < 26 {
        Some((b'A' + index as u8) as char)
    } else {
        None
    }
}

/// Renders a sample into its canonical text form.
pub fn render(sample: &Sample) -> Result<RenderedSample, RenderError> {
    sample.validate().map_err(|e| RenderError::InvalidSample {
        id: e.id,
        reason: e.reason,
    })?;
    let question = sample.question.trim();
    if question.is_empty() {
        return Err(RenderError::EmptyQuestion(sample.id.clone()));
    }

    let mut prompt = format!("Q: {question}");
    let answer_render = if sample.is_multiple_choice() {
        if sample.options.len() > 26 {
            return Err(RenderError::MoreThan26Options(sample.id.clone()));
        }
        for (i, option) in sample.options.iter().enumerate() {
            let letter = option_letter(i).expect("option count checked above");
            prompt.push_str(&format!(" ({letter}) {}", option.trim()));
        }
        let gold = option_letter(sample.answer_index.expect("validated")).expect("checked");
        format!("The answer is ({gold}).")
    } else {
        sample.answer_text.trim().to_string()
    };
    prompt.push_str(" A:");

    let full_text = format!("{prompt} {answer_render}");
    Ok(RenderedSample {
        id: sample.id.clone(),
        prompt_text: prompt,
        answer_render,
        full_text,
    })
}

/// A line of samples.jsonl that was rejected, with why.
#[derive(Debug, Error)]
pub enum LineError {
    #[error("line {line}: malformed: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: invariant violated: {source}")]
    Invariant {
        line: usize,
        source: InvariantViolation,
    },
}

impl LineError {
    pub fn line(&self) -> usize {
        match self {
            LineError::Malformed { line, .. }
            | LineError::DuplicateId { line, .. }
            | LineError::Invariant { line, .. } => *line,
        }
    }
}

/// Result of reading a samples.jsonl file: parsed samples in file order plus
/// one entry per rejected line. `samples.len() + rejects.len()` always equals
/// the number of lines in the file.
#[derive(Debug)]
pub struct LoadOutcome {
    pub samples: Vec<Sample>,
    pub rejects: Vec<LineError>,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{file} row {row}: bad answer letter {letter:?}")]
    BadAnswerLetter {
        file: String,
        row: usize,
        letter: String,
    },
    #[error("{file} row {row}: expected 5 or 6 columns, found {found}")]
    MissingColumn {
        file: String,
        row: usize,
        found: usize,
    },
    #[error("{file}: {source}")]
    Csv { file: String, source: csv::Error },
}

const KNOWN_SAMPLE_KEYS: [&str; 8] = [
    "id",
    "task",
    "question",
    "options",
    "answer_index",
    "answer_text",
    "subject",
    "split",
];

/// Reads samples.jsonl. Bad lines are collected, never silently dropped.
///
/// In strict mode a line with keys outside the sample schema is rejected; in
/// lenient mode the extra keys are stripped with a warning.
pub fn load_jsonl(path: &Path, strict: bool) -> Result<LoadOutcome, IngestError> {
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);

    let mut samples = Vec::new();
    let mut rejects = Vec::new();
    let mut seen_ids: HashSet<String> = HashSet::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| IngestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        match parse_sample_line(&line, line_no, strict, &mut seen_ids) {
            Ok(sample) => samples.push(sample),
            Err(err) => {
                log::warn!("{}: {err}", path.display());
                rejects.push(err);
            }
        }
    }
    Ok(LoadOutcome { samples, rejects })
}

fn parse_sample_line(
    line: &str,
    line_no: usize,
    strict: bool,
    seen_ids: &mut HashSet<String>,
) -> Result<Sample, LineError> {
    let malformed = |msg: String| LineError::Malformed { line: line_no, msg };

    let mut value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
    let object = value
        .as_object_mut()
        .ok_or_else(|| malformed("not a JSON object".into()))?;

    let unknown: Vec<String> = object
        .keys()
        .filter(|k| !KNOWN_SAMPLE_KEYS.contains(&k.as_str()))
        .cloned()
        .collect();
    if !unknown.is_empty() {
        if strict {
            return Err(malformed(format!("unknown keys: {}", unknown.join(", "))));
        }
        log::warn!("line {line_no}: dropping unknown keys: {}", unknown.join(", "));
        for key in &unknown {
            object.remove(key);
        }
    }

    let sample: Sample = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
    sample.validate().map_err(|source| LineError::Invariant {
        line: line_no,
        source,
    })?;
    if !seen_ids.insert(sample.id.clone()) {
        return Err(LineError::DuplicateId {
            line: line_no,
            id: sample.id,
        });
    }
    Ok(sample)
}

/// Reads a directory of per-subject CSV files in the MMLU layout: one row
/// per question, columns `question, <options...>, answer-letter`, 5 or 6
/// columns total (3 or 4 options). A header row is assumed when the first
/// row's last cell is not a valid single answer letter.
///
/// The subject (and task) name is the file stem with any `_test`, `_val`, or
/// `_dev` suffix removed; sample ids are `{subject}/{row}`. Files are read in
/// name order so output is stable across platforms.
pub fn adapter_mmlu(csv_dir: &Path) -> Result<Vec<Sample>, IngestError> {
    let io_err = |source: std::io::Error| IngestError::Io {
        path: csv_dir.display().to_string(),
        source,
    };
    let mut files: Vec<_> = std::fs::read_dir(csv_dir)
        .map_err(io_err)?
        .collect::<Result<Vec<_>, _>>()
        .map_err(io_err)?
        .into_iter()
        .map(|entry| entry.path())
        .filter(|p| p.extension().is_some_and(|ext| ext == "csv"))
        .collect();
    files.sort();

    let mut samples = Vec::new();
    for path in files {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default();
        let subject = stem
            .strip_suffix("_test")
            .or_else(|| stem.strip_suffix("_val"))
            .or_else(|| stem.strip_suffix("_dev"))
            .unwrap_or(stem)
            .to_string();
        let before = samples.len();
        read_mmlu_file(&path, &subject, &mut samples)?;
        if samples.len() == before {
            log::warn!("{}: no data rows", path.display());
        }
    }
    Ok(samples)
}

fn read_mmlu_file(
    path: &Path,
    subject: &str,
    samples: &mut Vec<Sample>,
) -> Result<(), IngestError> {
    let file_name = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|source| IngestError::Csv {
            file: file_name.clone(),
            source,
        })?;

    let mut data_row = 0usize;
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|source| IngestError::Csv {
            file: file_name.clone(),
            source,
        })?;
        let fields: Vec<&str> = record.iter().collect();
        if !(fields.len() == 5 || fields.len() == 6) {
            return Err(IngestError::MissingColumn {
                file: file_name,
                row: row_idx + 1,
                found: fields.len(),
            });
        }
        let options: Vec<String> = fields[1..fields.len() - 1]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let letter_field = fields[fields.len() - 1].trim();

        let answer_index = parse_answer_letter(letter_field, options.len());
        if row_idx == 0 && answer_index.is_none() {
            // First row without a valid answer letter: header, skip it.
            continue;
        }
        let answer_index = answer_index.ok_or_else(|| IngestError::BadAnswerLetter {
            file: file_name.clone(),
            row: row_idx + 1,
            letter: letter_field.to_string(),
        })?;

        samples.push(Sample {
            id: format!("{subject}/{data_row}"),
            task: subject.to_string(),
            question: fields[0].to_string(),
            answer_text: options[answer_index].clone(),
            options,
            answer_index: Some(answer_index),
            subject: Some(subject.to_string()),
            split: Split::Unassigned,
        });
        data_row += 1;
    }
    Ok(())
}

fn parse_answer_letter(field: &str, n_options: usize) -> Option<usize> {
    let mut chars = field.chars();
    let letter = chars.next()?;
    if chars.next().is_some() {
        return None;
    }
    let index = (letter.to_ascii_uppercase() as u8).checked_sub(b'A')? as usize;
    (letter.is_ascii_alphabetic() && index < n_options).then_some(index)
}
