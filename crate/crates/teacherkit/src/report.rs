//! Corpus statistics and report rendering.
//!
//! Statistics are computed at full precision; rendering decides how much of
//! it to show. Markdown rounds token averages to whole numbers, CSV keeps
//! every digit. All output uses LF line endings and task-alphabetical row
//! order so repeated runs are byte-identical.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::core::{AugmentedSample, ExplanationKind, Split, Tokenizer};
use crate::eval::{aggregate, TaskResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStats {
    pub task: String,
    /// Most common option-list length; 0 means free-form. Ties pick the
    /// smaller length.
    pub option_count: usize,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub n_unassigned: usize,
    /// Mean token count of each explanation field, over the samples that
    /// carry that field. Absent kinds are absent keys.
    pub avg_tokens: BTreeMap<ExplanationKind, f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CorpusStats {
    /// Sorted by task name.
    pub tasks: Vec<TaskStats>,
}

pub fn dataset_stats(augs: &[AugmentedSample], tokenizer: &dyn Tokenizer) -> CorpusStats {
    struct Accum {
        option_lengths: BTreeMap<usize, usize>,
        splits: BTreeMap<Split, usize>,
        token_sums: BTreeMap<ExplanationKind, (usize, usize)>,
    }

    let mut per_task: BTreeMap<String, Accum> = BTreeMap::new();
    for aug in augs {
        let acc = per_task.entry(aug.sample.task.clone()).or_insert_with(|| Accum {
            option_lengths: BTreeMap::new(),
            splits: BTreeMap::new(),
            token_sums: BTreeMap::new(),
        });
        *acc.option_lengths.entry(aug.sample.options.len()).or_insert(0) += 1;
        *acc.splits.entry(aug.sample.split).or_insert(0) += 1;
        for (kind, explanation) in &aug.explanations {
            let (sum, n) = acc.token_sums.entry(*kind).or_insert((0, 0));
            *sum += tokenizer.encode(&explanation.text).len();
            *n += 1;
        }
    }

    let tasks = per_task
        .into_iter()
        .map(|(task, acc)| {
            let option_count = acc
                .option_lengths
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(len, _)| *len)
                .unwrap_or(0);
            let split = |s: Split| acc.splits.get(&s).copied().unwrap_or(0);
            TaskStats {
                task,
                option_count,
                n_train: split(Split::Train),
                n_validation: split(Split::Validation),
                n_test: split(Split::Test),
                n_unassigned: split(Split::Unassigned),
                avg_tokens: acc
                    .token_sums
                    .into_iter()
                    .map(|(kind, (sum, n))| (kind, sum as f64 / n as f64))
                    .collect(),
            }
        })
        .collect();
    CorpusStats { tasks }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown report format {other:?} (expected md or csv)")),
        }
    }
}

/// The explanation-kind columns a stats table needs: kinds present in at
/// least one task, in declaration order.
fn stat_kinds(stats: &CorpusStats) -> Vec<ExplanationKind> {
    ExplanationKind::ALL
        .iter()
        .copied()
        .filter(|k| stats.tasks.iter().any(|t| t.avg_tokens.contains_key(k)))
        .collect()
}

pub fn render_stats(stats: &CorpusStats, format: ReportFormat) -> String {
    let mut rows: Vec<&TaskStats> = stats.tasks.iter().collect();
    rows.sort_by(|a, b| a.task.cmp(&b.task));
    let kinds = stat_kinds(stats);

    let mut header = vec![
        "task".to_string(),
        "options".to_string(),
        "train".to_string(),
        "validation".to_string(),
        "test".to_string(),
        "unassigned".to_string(),
    ];
    header.extend(kinds.iter().map(|k| format!("avg_{}_tokens", k.name())));

    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|t| {
            let mut row = vec![
                t.task.clone(),
                // Free-form tasks have no option list to count.
                if t.option_count == 0 && format == ReportFormat::Markdown {
                    "/".to_string()
                } else {
                    t.option_count.to_string()
                },
                t.n_train.to_string(),
                t.n_validation.to_string(),
                t.n_test.to_string(),
                t.n_unassigned.to_string(),
            ];
            for kind in &kinds {
                row.push(match (t.avg_tokens.get(kind), format) {
                    (Some(avg), ReportFormat::Markdown) => format!("{}", avg.round() as i64),
                    (Some(avg), ReportFormat::Csv) => format!("{avg}"),
                    (None, ReportFormat::Markdown) => "/".to_string(),
                    (None, ReportFormat::Csv) => String::new(),
                });
            }
            row
        })
        .collect();

    render_table(&header, &body, format)
}

/// Renders task results plus a final macro-average row. Markdown shows
/// accuracies as percents to two decimals; CSV keeps the raw fractions.
pub fn render_results(results: &[TaskResult], format: ReportFormat) -> String {
    let mut rows: Vec<&TaskResult> = results.iter().collect();
    rows.sort_by(|a, b| a.task.cmp(&b.task));

    let header: Vec<String> =
        ["task", "n_items", "n_correct", "accuracy"].iter().map(|s| s.to_string()).collect();
    let mut body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.task.clone(),
                r.n_items.to_string(),
                r.n_correct.to_string(),
                match format {
                    ReportFormat::Markdown => format!("{:.2}", r.accuracy * 100.0),
                    ReportFormat::Csv => format!("{}", r.accuracy),
                },
            ]
        })
        .collect();

    if let Ok(macro_average) = aggregate(results) {
        body.push(vec![
            "macro_average".to_string(),
            String::new(),
            String::new(),
            match format {
                ReportFormat::Markdown => format!("{:.2}", macro_average * 100.0),
                ReportFormat::Csv => format!("{macro_average}"),
            },
        ]);
    }

    render_table(&header, &body, format)
}

fn render_table(header: &[String], body: &[Vec<String>], format: ReportFormat) -> String {
    match format {
        ReportFormat::Markdown => {
            let mut out = String::new();
            out.push_str(&format!("| {} |\n", header.join(" | ")));
            out.push_str(&format!("|{}\n", " --- |".repeat(header.len())));
            for row in body {
                out.push_str(&format!("| {} |\n", row.join(" | ")));
            }
            out
        }
        ReportFormat::Csv => {
            let mut writer = csv::WriterBuilder::new().from_writer(Vec::new());
            writer.write_record(header).expect("in-memory write");
            for row in body {
                writer.write_record(row).expect("in-memory write");
            }
            String::from_utf8(writer.into_inner().expect("in-memory flush"))
                .expect("csv output is UTF-8")
        }
    }
}
