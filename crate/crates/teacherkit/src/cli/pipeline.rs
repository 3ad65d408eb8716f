//! End-to-end pipeline orchestration.
//!
//! Stages run in a fixed order, each writing its artifacts before the next
//! starts, so a failed run leaves everything completed so far on disk plus
//! a manifest naming the failed stage. The manifest is the reproducibility
//! record: input hashes, effective config, seeds, artifact hashes, and
//! record counts. Its only non-deterministic field is `created_unix`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{IngestFormat, PipelineConfig};
use super::io;
use super::CliError;
use crate::compose::build_variant_corpus;
use crate::core::{AugmentedSample, Backend, GenParams, Sample};
use crate::curate::{curate, CurationConfig};
use crate::eval::{aggregate, eval_item_from_sample, evaluate_task, EvalError, EvalItem, ItemRecord, TaskResult};
use crate::ingest::{adapter_mmlu, load_jsonl};
use crate::pack::{self, PackConfig};
use crate::report::{dataset_stats, render_results, render_stats, ReportFormat};
use crate::teacher::{parse_kinds, HttpBackend, StarConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Path relative to the run's out_dir.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub stage: String,
    pub outputs: Vec<ArtifactRecord>,
    /// Scalar stage metrics (counts, averages).
    pub counts: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    /// Wall-clock seconds at manifest write. The one field two otherwise
    /// identical runs are allowed to differ in.
    pub created_unix: u64,
    pub config: PipelineConfig,
    pub input_sha256: String,
    pub stages: Vec<StageEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Hashes the pipeline input: a file's contents, or for a directory the
/// sorted (name, file hash) listing.
fn hash_input(path: &Path) -> Result<String, io::IoError> {
    if path.is_dir() {
        let mut names: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|source| io::IoError::File { path: path.display().to_string(), source })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        let mut listing = String::new();
        for name in names {
            let base = name.file_name().unwrap_or_default().to_string_lossy().into_owned();
            listing.push_str(&format!("{base}:{}\n", io::sha256_file(&name)?));
        }
        let digest: [u8; 32] = {
            use sha2::{Digest, Sha256};
            Sha256::digest(listing.as_bytes()).into()
        };
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    } else {
        io::sha256_file(path)
    }
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    out_dir: PathBuf,
    stages: Vec<StageEntry>,
}

impl Runner<'_> {
    fn artifact(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn record_stage(
        &mut self,
        stage: &str,
        outputs: &[&str],
        counts: BTreeMap<String, f64>,
    ) -> Result<(), CliError> {
        let mut records = Vec::with_capacity(outputs.len());
        for name in outputs {
            let sha256 = io::sha256_file(&self.artifact(name))
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            records.push(ArtifactRecord { path: name.to_string(), sha256 });
        }
        self.stages.push(StageEntry {
            stage: stage.to_string(),
            outputs: records,
            counts,
        });
        Ok(())
    }

    fn ingest(&mut self) -> Result<Vec<Sample>, CliError> {
        let input = &self.cfg.pipeline.input;
        let (samples, n_rejected) = match self.cfg.ingest.format {
            IngestFormat::Jsonl => {
                let outcome = load_jsonl(input, self.cfg.ingest.strict)
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                if self.cfg.ingest.strict && !outcome.rejects.is_empty() {
                    let first = &outcome.rejects[0];
                    return Err(CliError::Runtime(format!(
                        "{} rejected {} line(s); first: {first}",
                        input.display(),
                        outcome.rejects.len(),
                    )));
                }
                (outcome.samples, outcome.rejects.len())
            }
            IngestFormat::MmluCsv => {
                (adapter_mmlu(input).map_err(|e| CliError::Runtime(e.to_string()))?, 0)
            }
        };
        io::write_jsonl(&self.artifact("samples.jsonl"), &samples)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let counts = BTreeMap::from([
            ("samples".to_string(), samples.len() as f64),
            ("rejected".to_string(), n_rejected as f64),
        ]);
        self.record_stage("ingest", &["samples.jsonl"], counts)?;
        Ok(samples)
    }

    fn curate(&mut self, samples: Vec<Sample>) -> Result<Vec<Sample>, CliError> {
        let cfg = CurationConfig {
            max_tokens: self.cfg.curate.max_tokens,
            per_task_cap: self.cfg.curate.cap,
            seed: self.cfg.pipeline.seed,
            tokenizer: self.cfg.pipeline.tokenizer,
        };
        let n_input = samples.len();
        let ratios = self.cfg.curate.split.map(|s| s.0);
        let (curated, report) = curate(samples, &cfg, ratios.as_ref())
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        io::write_jsonl(&self.artifact("curated.jsonl"), &curated)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        io::write_json_pretty(&self.artifact("curation_report.json"), &report)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let counts = BTreeMap::from([
            ("input".to_string(), n_input as f64),
            ("kept".to_string(), curated.len() as f64),
        ]);
        self.record_stage("curate", &["curated.jsonl", "curation_report.json"], counts)?;
        Ok(curated)
    }

    fn augment(
        &mut self,
        samples: &[Sample],
        backend: &dyn Backend,
    ) -> Result<Vec<AugmentedSample>, CliError> {
        let kinds = parse_kinds(&self.cfg.augment.kinds).map_err(CliError::Config)?;
        let params = GenParams {
            max_new_tokens: self.cfg.augment.max_new_tokens,
            temperature: self.cfg.augment.temperature,
            seed: Some(self.cfg.pipeline.seed),
            ..GenParams::default()
        };
        let star = StarConfig {
            enabled: self.cfg.augment.star,
            max_attempts: self.cfg.augment.max_attempts,
            ..StarConfig::default()
        };
        let (augs, ledger) = crate::teacher::augment_corpus(
            samples.to_vec(),
            &kinds,
            backend,
            &params,
            self.cfg.augment.concurrency,
            &star,
        )
        .map_err(|e| CliError::Runtime(e.to_string()))?;
        io::write_augmented(&self.artifact("augmented.jsonl"), &augs)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        io::write_jsonl(&self.artifact("augment_ledger.jsonl"), &ledger)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let n_explanations: usize = augs.iter().map(|a| a.explanations.len()).sum();
        // Individual failures degrade into the ledger, but a run where every
        // single request failed means the endpoint is down; aborting here is
        // what surfaces that as a runtime failure. The artifacts above stay
        // on disk for diagnosis.
        if n_explanations == 0 && !ledger.is_empty() {
            return Err(CliError::Runtime(format!(
                "augment produced no explanations ({} failures); is the endpoint reachable?",
                ledger.len()
            )));
        }
        let counts = BTreeMap::from([
            ("samples".to_string(), augs.len() as f64),
            ("explanations".to_string(), n_explanations as f64),
            ("failures".to_string(), ledger.len() as f64),
        ]);
        self.record_stage("augment", &["augmented.jsonl", "augment_ledger.jsonl"], counts)?;
        Ok(augs)
    }

    fn compose(&mut self, augs: &[AugmentedSample]) -> Result<Vec<(String, String)>, CliError> {
        let (records, skips) =
            build_variant_corpus(augs, self.cfg.compose.variant, self.cfg.compose.shuffle_seed);
        io::write_jsonl(&self.artifact("composed.jsonl"), &records)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        io::write_jsonl(&self.artifact("compose_skips.jsonl"), &skips)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let counts = BTreeMap::from([
            ("composed".to_string(), records.len() as f64),
            ("skipped".to_string(), skips.len() as f64),
        ]);
        self.record_stage("compose", &["composed.jsonl", "compose_skips.jsonl"], counts)?;
        Ok(records.into_iter().map(|r| (r.id, r.text)).collect())
    }

    fn pack(&mut self, texts: &[(String, String)]) -> Result<(), CliError> {
        let cfg = PackConfig {
            max_len: self.cfg.pack.max_len,
            tokenizer: self.cfg.pack.tokenizer,
            pad_final: self.cfg.pack.pad_final,
            on_overlong: self.cfg.pack.on_overlong,
        };
        let tokenizer = cfg.tokenizer.create();
        let (packs, skips) =
            pack::pack(texts, &cfg, tokenizer.as_ref()).map_err(|e| CliError::Runtime(e.to_string()))?;
        let manifest = pack::manifest(&packs, &skips, &cfg, self.cfg.pack.training_hints.clone());
        io::write_jsonl(&self.artifact("packed.jsonl"), &packs)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        io::write_json_pretty(&self.artifact("pack_manifest.json"), &manifest)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let counts = BTreeMap::from([
            ("packs".to_string(), manifest.n_packs as f64),
            ("packed_texts".to_string(), manifest.n_packed as f64),
            ("skipped".to_string(), manifest.n_skipped as f64),
            ("utilization".to_string(), manifest.utilization),
        ]);
        self.record_stage("pack", &["packed.jsonl", "pack_manifest.json"], counts)?;
        Ok(())
    }

    fn eval(
        &mut self,
        curated: &[Sample],
        backend: &dyn Backend,
    ) -> Result<Option<Vec<TaskResult>>, CliError> {
        if !self.cfg.eval.enabled {
            return Ok(None);
        }
        let (items, n_unrankable) = eval_items_from_corpus(curated, self.cfg.eval.candidate_form)?;

        let mut results = Vec::new();
        let mut records: Vec<ItemRecord> = Vec::new();
        for (task, task_items) in &items {
            match evaluate_task(task_items, backend, self.cfg.eval.subject_prefix) {
                Ok(eval) => {
                    results.push(eval.result);
                    records.extend(eval.records);
                }
                Err(abort) => {
                    records.extend(abort.partial.iter().cloned());
                    let _ = io::write_jsonl(&self.artifact("eval_records.jsonl"), &records);
                    return Err(CliError::Runtime(format!("eval of task {task}: {abort}")));
                }
            }
        }
        let macro_average = match aggregate(&results) {
            Ok(v) => v,
            Err(EvalError::EmptyResults) => {
                return Err(CliError::Runtime("eval produced no task results".into()))
            }
            Err(e) => return Err(CliError::Runtime(e.to_string())),
        };

        std::fs::write(self.artifact("results.csv"), render_results(&results, ReportFormat::Csv))
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        io::write_jsonl(&self.artifact("eval_records.jsonl"), &records)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let counts = BTreeMap::from([
            ("tasks".to_string(), results.len() as f64),
            ("items".to_string(), records.len() as f64),
            ("unrankable".to_string(), n_unrankable as f64),
            ("macro_average".to_string(), macro_average),
        ]);
        self.record_stage("eval", &["results.csv", "eval_records.jsonl"], counts)?;
        Ok(Some(results))
    }

    fn report(
        &mut self,
        augs: &[AugmentedSample],
        results: Option<&[TaskResult]>,
    ) -> Result<(), CliError> {
        let tokenizer = self.cfg.pipeline.tokenizer.create();
        let stats = dataset_stats(augs, tokenizer.as_ref());
        let mut outputs: Vec<String> = Vec::new();
        for format in &self.cfg.report.formats {
            let (suffix, format) = match format.0 {
                ReportFormat::Markdown => ("md", ReportFormat::Markdown),
                ReportFormat::Csv => ("csv", ReportFormat::Csv),
            };
            let stats_name = format!("stats.{suffix}");
            std::fs::write(self.artifact(&stats_name), render_stats(&stats, format))
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            outputs.push(stats_name);
            if let Some(results) = results {
                let results_name = format!("results.{suffix}");
                // results.csv is already the eval stage's artifact.
                if format != ReportFormat::Csv {
                    std::fs::write(self.artifact(&results_name), render_results(results, format))
                        .map_err(|e| CliError::Runtime(e.to_string()))?;
                    outputs.push(results_name);
                }
            }
        }
        let names: Vec<&str> = outputs.iter().map(|s| s.as_str()).collect();
        self.record_stage("report", &names, BTreeMap::new())?;
        Ok(())
    }
}

/// Groups a corpus into per-task eval item lists, task-alphabetically.
/// When the corpus has split labels, only the test split is evaluated.
/// Free-form samples cannot be rank-classified and are counted out.
pub fn eval_items_from_corpus(
    curated: &[Sample],
    form: crate::eval::CandidateForm,
) -> Result<(BTreeMap<String, Vec<EvalItem>>, usize), CliError> {
    use crate::core::Split;
    let any_split = curated.iter().any(|s| s.split != Split::Unassigned);
    let mut items: BTreeMap<String, Vec<EvalItem>> = BTreeMap::new();
    let mut n_unrankable = 0usize;
    for sample in curated {
        if any_split && sample.split != Split::Test {
            continue;
        }
        match eval_item_from_sample(sample, form) {
            Ok(item) => items.entry(item.task.clone()).or_default().push(item),
            Err(EvalError::NoOptions(_)) => n_unrankable += 1,
            Err(e) => return Err(CliError::Runtime(e.to_string())),
        }
    }
    Ok((items, n_unrankable))
}

/// Resolves the generation endpoint: config first, then TEACHERKIT_ENDPOINT.
pub fn resolve_endpoint(configured: Option<&str>) -> Result<String, CliError> {
    if let Some(endpoint) = configured {
        return Ok(endpoint.to_string());
    }
    match std::env::var("TEACHERKIT_ENDPOINT") {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(CliError::Config(
            "no endpoint: set pipeline.endpoint, --endpoint, or TEACHERKIT_ENDPOINT".into(),
        )),
    }
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn run_pipeline(cfg: &PipelineConfig, out_dir_override: Option<&Path>) -> Result<(), CliError> {
    cfg.validate().map_err(CliError::Config)?;
    let out_dir = out_dir_override.unwrap_or(&cfg.pipeline.out_dir).to_path_buf();
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Runtime(format!("create {}: {e}", out_dir.display())))?;

    // Augmentation always needs a teacher, so the endpoint is resolved up
    // front rather than failing mid-run.
    let backend = HttpBackend::new(&resolve_endpoint(cfg.pipeline.endpoint.as_deref())?);

    let input_sha256 =
        hash_input(&cfg.pipeline.input).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut runner = Runner { cfg, out_dir: out_dir.clone(), stages: Vec::new() };

    let outcome = (|| -> Result<(), (&'static str, CliError)> {
        let tag = |stage: &'static str| move |e: CliError| (stage, e);
        let samples = runner.ingest().map_err(tag("ingest"))?;
        log::info!("ingest: {} samples", samples.len());
        let curated = runner.curate(samples).map_err(tag("curate"))?;
        log::info!("curate: {} kept", curated.len());
        let augs = runner.augment(&curated, &backend).map_err(tag("augment"))?;
        log::info!("augment: {} samples explained", augs.len());
        let texts = runner.compose(&augs).map_err(tag("compose"))?;
        log::info!("compose: {} records", texts.len());
        runner.pack(&texts).map_err(tag("pack"))?;
        let results = runner.eval(&curated, &backend).map_err(tag("eval"))?;
        if let Some(results) = &results {
            log::info!("eval: {} task(s)", results.len());
        }
        runner.report(&augs, results.as_deref()).map_err(tag("report"))?;
        Ok(())
    })();

    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        created_unix: unix_now(),
        config: cfg.clone(),
        input_sha256,
        stages: runner.stages,
        failed_stage: outcome.as_ref().err().map(|(stage, _)| stage.to_string()),
        error: outcome.as_ref().err().map(|(_, e)| e.to_string()),
    };
    io::write_json_pretty(&out_dir.join("run_manifest.json"), &manifest)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    outcome.map_err(|(_, e)| e)
}
