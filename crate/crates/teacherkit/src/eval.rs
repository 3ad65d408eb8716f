//! Rank-classification evaluation.
//!
//! Each item carries a prompt and a fixed candidate set. A candidate's score
//! is the mean log-probability of its tokens given the prompt, and the
//! prediction is the highest-scoring candidate. Mean (not total) logprob
//! keeps long candidates competitive with short ones.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::{Backend, BackendError, Sample};
use crate::ingest::{self, RenderError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: String,
    pub task: String,
    pub prompt: String,
    pub candidates: Vec<String>,
    pub gold_index: usize,
}

impl EvalItem {
    pub fn validate(&self) -> Result<(), EvalError> {
        let invalid = |reason: String| EvalError::InvalidItem { id: self.id.clone(), reason };
        if self.candidates.is_empty() {
            return Err(invalid("no candidates".into()));
        }
        if self.gold_index >= self.candidates.len() {
            return Err(invalid(format!(
                "gold_index {} out of range for {} candidates",
                self.gold_index,
                self.candidates.len()
            )));
        }
        for (i, a) in self.candidates.iter().enumerate() {
            for b in &self.candidates[i + 1..] {
                if a == b {
                    return Err(invalid(format!("duplicate candidate text {a:?}")));
                }
            }
        }
        Ok(())
    }
}

/// Per-candidate audit trail of one rank_classify call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub index: usize,
    /// Mean of `token_logprobs`, summed left to right then divided once.
    pub score: f64,
    pub token_count: usize,
    pub token_logprobs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: String,
    pub n_items: usize,
    pub n_correct: usize,
    pub accuracy: f64,
}

/// One line of records.jsonl: the chosen and gold indices plus every
/// candidate's mean score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: String,
    pub task: String,
    pub chosen: usize,
    pub gold: usize,
    pub scores: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("item {item}: candidate {index} encodes to zero tokens")]
    ZeroTokenCandidate { item: String, index: usize },
    #[error("invalid eval item {id}: {reason}")]
    InvalidItem { id: String, reason: String },
    #[error("sample {0} has no options to rank against")]
    NoOptions(String),
    #[error("task has no items")]
    EmptyTask,
    #[error("item {id} belongs to task {found}, expected {expected}")]
    MixedTasks { id: String, expected: String, found: String },
    #[error("no task results to aggregate")]
    EmptyResults,
    #[error("task {0} appears more than once")]
    DuplicateTask(String),
}

/// Scores every candidate and picks the argmax; ties go to the lowest index.
/// The continuation is conditioned on `prompt + " "`, matching the renderer's
/// single-space join.
pub fn rank_classify(
    item: &EvalItem,
    backend: &dyn Backend,
) -> Result<(usize, Vec<CandidateScore>), EvalError> {
    item.validate()?;
    let context = format!("{} ", item.prompt);

    let mut scores = Vec::with_capacity(item.candidates.len());
    for (index, candidate) in item.candidates.iter().enumerate() {
        let token_logprobs = backend.continuation_logprobs(&context, candidate)?;
        if token_logprobs.is_empty() {
            return Err(EvalError::ZeroTokenCandidate { item: item.id.clone(), index });
        }
        let mut sum = 0.0;
        for &lp in &token_logprobs {
            sum += lp;
        }
        scores.push(CandidateScore {
            index,
            score: sum / token_logprobs.len() as f64,
            token_count: token_logprobs.len(),
            token_logprobs,
        });
    }

    let mut chosen = 0;
    for s in &scores[1..] {
        if s.score > scores[chosen].score {
            chosen = s.index;
        }
    }
    Ok((chosen, scores))
}

/// Prepends the standard subject framing sentence. Underscores in the
/// subject (as in MMLU file stems) become spaces.
pub fn subject_prefix(item: &EvalItem, subject: &str) -> EvalItem {
    debug_assert!(!subject.is_empty());
    let subject = subject.replace('_', " ");
    EvalItem {
        prompt: format!(
            "The following are multiple choice questions (with answers) about {subject}.\n\n{}",
            item.prompt
        ),
        ..item.clone()
    }
}

/// How candidate texts are formed from a sample's options.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateForm {
    /// "The answer is (A)." per option, the same string the renderer trains on.
    Sentence,
    /// The option text itself.
    Raw,
}

impl std::str::FromStr for CandidateForm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sentence" => Ok(CandidateForm::Sentence),
            "raw" => Ok(CandidateForm::Raw),
            other => Err(format!("unknown candidate form {other:?} (expected sentence or raw)")),
        }
    }
}

/// Builds an eval item from a multiple-choice sample. Free-form samples have
/// no candidate set and are rejected.
pub fn eval_item_from_sample(sample: &Sample, form: CandidateForm) -> Result<EvalItem, EvalError> {
    let rendered = ingest::render(sample)?;
    if sample.options.is_empty() {
        return Err(EvalError::NoOptions(sample.id.clone()));
    }
    let candidates: Vec<String> = match form {
        CandidateForm::Sentence => (0..sample.options.len())
            .map(|i| {
                let letter = ingest::option_letter(i).expect("render already capped options at 26");
                format!("The answer is ({letter}).")
            })
            .collect(),
        CandidateForm::Raw => sample.options.iter().map(|o| o.trim().to_string()).collect(),
    };
    let item = EvalItem {
        id: sample.id.clone(),
        task: sample.task.clone(),
        prompt: rendered.prompt_text,
        candidates,
        gold_index: sample.answer_index.expect("render already validated MC shape"),
    };
    item.validate()?;
    Ok(item)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskEvaluation {
    pub result: TaskResult,
    pub records: Vec<ItemRecord>,
}

/// A task evaluation stopped mid-way. Records for the items finished before
/// the failure are preserved so partial work can be written out.
#[derive(Debug, Error)]
#[error("task {task} aborted at item {item_id}: {source}")]
pub struct TaskAbort {
    pub task: String,
    pub item_id: String,
    pub source: EvalError,
    pub partial: Vec<ItemRecord>,
}

/// Evaluates every item of one task in order. With `use_subject_prefix` the
/// task name doubles as the subject of the framing sentence.
pub fn evaluate_task(
    items: &[EvalItem],
    backend: &dyn Backend,
    use_subject_prefix: bool,
) -> Result<TaskEvaluation, Box<TaskAbort>> {
    let abort = |item: &EvalItem, source: EvalError, partial: Vec<ItemRecord>| {
        Box::new(TaskAbort {
            task: item.task.clone(),
            item_id: item.id.clone(),
            source,
            partial,
        })
    };

    let Some(first) = items.first() else {
        return Err(Box::new(TaskAbort {
            task: String::new(),
            item_id: String::new(),
            source: EvalError::EmptyTask,
            partial: Vec::new(),
        }));
    };
    let task = first.task.clone();

    let mut records = Vec::with_capacity(items.len());
    let mut n_correct = 0;
    for item in items {
        if item.task != task {
            let source = EvalError::MixedTasks {
                id: item.id.clone(),
                expected: task.clone(),
                found: item.task.clone(),
            };
            return Err(abort(item, source, records));
        }
        let scored = if use_subject_prefix { subject_prefix(item, &item.task) } else { item.clone() };
        let (chosen, scores) = match rank_classify(&scored, backend) {
            Ok(r) => r,
            Err(source) => return Err(abort(item, source, records)),
        };
        if chosen == item.gold_index {
            n_correct += 1;
        }
        records.push(ItemRecord {
            id: item.id.clone(),
            task: item.task.clone(),
            chosen,
            gold: item.gold_index,
            scores: scores.iter().map(|s| s.score).collect(),
        });
    }

    Ok(TaskEvaluation {
        result: TaskResult {
            task,
            n_items: items.len(),
            n_correct,
            accuracy: n_correct as f64 / items.len() as f64,
        },
        records,
    })
}

/// Unweighted mean of per-task accuracies, as a fraction in [0, 1].
/// Accumulation runs in task-name order, so the value is independent of the
/// order results arrive in.
pub fn aggregate(results: &[TaskResult]) -> Result<f64, EvalError> {
    if results.is_empty() {
        return Err(EvalError::EmptyResults);
    }
    let mut ordered: Vec<&TaskResult> = results.iter().collect();
    ordered.sort_by(|a, b| a.task.cmp(&b.task));
    for pair in ordered.windows(2) {
        if pair[0].task == pair[1].task {
            return Err(EvalError::DuplicateTask(pair[0].task.clone()));
        }
    }
    let mut sum = 0.0;
    for r in &ordered {
        sum += r.accuracy;
    }
    Ok(sum / results.len() as f64)
}
