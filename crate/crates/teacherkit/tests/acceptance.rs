//! Acceptance gate: one test per release criterion, each printing a PASS
//! line (the harness reports FAIL via the usual panic path). Run with
//! `cargo test --test acceptance`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use teacherkit::compose::{compose_record, CompositionVariant, FieldKind};
use teacherkit::core::{
    Backend, BackendError, GenParams, MockBackend, Sample, Tokenizer, TokenizerKind,
    WhitespaceTokenizer,
};
use teacherkit::curate::{curate, CurationConfig, SplitRatios};
use teacherkit::eval::{aggregate, rank_classify, EvalItem, TaskResult};
use teacherkit::pack::{pack, unpack, OverlongPolicy, PackConfig, PAD_SEGMENT_ID};
use teacherkit::teacher::stub::{BoostRule, GenerateRule};
use teacherkit::teacher::{star_filter, HttpBackend, StarConfig, StubBehavior, StubServer};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Criterion 1: the 57 published per-task accuracies aggregate to the
/// published macro average, 52.30 +/- 0.05.
#[test]
fn criterion_1_published_task_accuracies_aggregate_to_52_30() {
    const TASK_PCT: [(&str, f64); 57] = [
        ("abstract_algebra", 30.00),
        ("anatomy", 46.67),
        ("astronomy", 51.32),
        ("business_ethics", 65.00),
        ("clinical_knowledge", 57.74),
        ("college_biology", 59.72),
        ("college_chemistry", 42.00),
        ("college_computer_science", 40.00),
        ("college_mathematics", 34.00),
        ("college_medicine", 50.29),
        ("college_physics", 41.18),
        ("computer_security", 64.00),
        ("conceptual_physics", 51.49),
        ("econometrics", 35.09),
        ("electrical_engineering", 53.10),
        ("elementary_mathematics", 39.42),
        ("formal_logic", 38.10),
        ("global_facts", 29.00),
        ("high_school_biology", 62.90),
        ("high_school_chemistry", 43.35),
        ("high_school_computer_science", 62.00),
        ("high_school_european_history", 61.21),
        ("high_school_geography", 67.68),
        ("high_school_government_and_politics", 68.39),
        ("high_school_macroeconomics", 55.64),
        ("high_school_mathematics", 29.26),
        ("high_school_microeconomics", 60.50),
        ("high_school_physics", 30.46),
        ("high_school_psychology", 70.83),
        ("high_school_statistics", 44.91),
        ("high_school_us_history", 54.90),
        ("high_school_world_history", 64.98),
        ("human_aging", 56.95),
        ("human_sexuality", 61.07),
        ("international_law", 71.90),
        ("jurisprudence", 62.96),
        ("logical_fallacies", 52.15),
        ("machine_learning", 29.46),
        ("management", 75.73),
        ("marketing", 79.06),
        ("medical_genetics", 57.00),
        ("miscellaneous", 60.54),
        ("moral_disputes", 55.20),
        ("moral_scenarios", 22.35),
        ("nutrition", 56.86),
        ("philosophy", 52.73),
        ("prehistory", 50.62),
        ("professional_accounting", 36.17),
        ("professional_law", 34.16),
        ("professional_medicine", 47.79),
        ("professional_psychology", 47.06),
        ("public_relations", 66.36),
        ("security_studies", 63.67),
        ("sociology", 70.15),
        ("us_foreign_policy", 70.00),
        ("virology", 42.17),
        ("world_religions", 55.56),
    ];

    let results: Vec<TaskResult> = TASK_PCT
        .iter()
        .map(|&(task, pct)| {
            // Accuracies are percents with two decimals, so n = 10000 keeps
            // n_correct / n_items == pct / 100 without rounding slack.
            let n_correct = (pct * 100.0).round() as usize;
            TaskResult {
                task: task.to_string(),
                n_items: 10_000,
                n_correct,
                accuracy: n_correct as f64 / 10_000.0,
            }
        })
        .collect();
    let macro_pct = aggregate(&results).unwrap() * 100.0;
    assert!(
        (macro_pct - 52.30).abs() <= 0.05,
        "macro average {macro_pct} outside 52.30 +/- 0.05"
    );
    println!("PASS criterion 1: 57-task fixture aggregates to {macro_pct:.4} (52.30 +/- 0.05)");
}

/// Naive transcription of mean-logprob argmax, kept deliberately separate
/// from the library implementation.
fn brute_force_choice(
    prompt: &str,
    candidates: &[String],
    backend: &dyn Backend,
) -> (usize, Vec<f64>) {
    let context = prompt.to_string() + " ";
    let mut best_index = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    let mut scores = Vec::new();
    for (i, candidate) in candidates.iter().enumerate() {
        let logprobs = backend.continuation_logprobs(&context, candidate).unwrap();
        let mut total = 0.0;
        for lp in &logprobs {
            total += *lp;
        }
        let mean = total / logprobs.len() as f64;
        scores.push(mean);
        if mean > best_score {
            best_score = mean;
            best_index = i;
        }
    }
    (best_index, scores)
}

fn random_words(rng: &mut ChaCha8Rng, n: usize) -> String {
    let mut out = String::new();
    for i in 0..n {
        if i > 0 {
            out.push(' ');
        }
        let len = rng.gen_range(1..=8);
        for _ in 0..len {
            out.push(rng.gen_range(b'a'..=b'z') as char);
        }
    }
    out
}

/// Criterion 2: rank_classify agrees with an independent brute-force
/// scorer on 1,000 randomized items.
#[test]
fn criterion_2_rank_classify_matches_brute_force_oracle() {
    let backend = MockBackend::new(3);
    let mut rng = ChaCha8Rng::seed_from_u64(2026);
    for case in 0..1000 {
        let n = rng.gen_range(2..=6);
        let candidates: Vec<String> = (0..n)
            .map(|i| {
                let words = rng.gen_range(1..=4);
                // Unique suffix keeps candidates pairwise distinct.
                format!("{} u{i}", random_words(&mut rng, words))
            })
            .collect();
        let prompt_words = rng.gen_range(3..=10);
        let item = EvalItem {
            id: format!("case{case}"),
            task: "oracle".into(),
            prompt: format!("Q: {} A:", random_words(&mut rng, prompt_words)),
            candidates: candidates.clone(),
            gold_index: 0,
        };
        let (chosen, scores) = rank_classify(&item, &backend).unwrap();
        let (expected, expected_scores) = brute_force_choice(&item.prompt, &candidates, &backend);
        assert_eq!(chosen, expected, "case {case}: argmax mismatch");
        for (s, e) in scores.iter().zip(&expected_scores) {
            assert!((s.score - e).abs() <= 1e-12, "case {case}: {} vs {e}", s.score);
        }
    }
    println!("PASS criterion 2: 1000 randomized items match the brute-force scorer");
}

fn check_pack_invariants(packs: &[teacherkit::pack::PackedSequence], max_len: usize) {
    for p in packs {
        assert!(p.tokens.len() <= max_len);
        assert_eq!(p.tokens.len(), p.segment_ids.len());
        assert_eq!(p.tokens.len(), p.position_ids.len());
        let mut current = -1i32;
        let mut in_pad = false;
        for k in 0..p.tokens.len() {
            let seg = p.segment_ids[k];
            let boundary = k == 0 || seg != p.segment_ids[k - 1];
            assert_eq!(p.position_ids[k] == 0, boundary, "position resets exactly at boundaries");
            if boundary {
                if seg == PAD_SEGMENT_ID {
                    in_pad = true;
                } else {
                    assert!(!in_pad, "data segment after padding");
                    assert_eq!(seg, current + 1, "segment ids count up from 0");
                    current = seg;
                }
            }
        }
    }
}

/// Criterion 3: pack/unpack round-trips 10,000 random text sets across
/// both tokenizers and both target lengths, preserving every invariant.
#[test]
fn criterion_3_packing_round_trips_10000_text_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut sets_done = 0usize;
    for &(kind, max_len) in &[
        (TokenizerKind::Whitespace, 64usize),
        (TokenizerKind::Whitespace, 2048),
        (TokenizerKind::Byte, 64),
        (TokenizerKind::Byte, 2048),
    ] {
        let cfg = PackConfig {
            max_len,
            tokenizer: kind,
            pad_final: sets_done.is_multiple_of(2),
            on_overlong: OverlongPolicy::Error,
        };
        for _ in 0..2500 {
            let n_texts = rng.gen_range(1..=8);
            let texts: Vec<(String, String)> = (0..n_texts)
                .map(|i| {
                    let text = match kind {
                        // Whitespace round-trips exactly on canonical
                        // single-space word strings.
                        TokenizerKind::Whitespace => {
                            let words = rng.gen_range(0..=30);
                            random_words(&mut rng, words)
                        }
                        TokenizerKind::Byte => {
                            let len = rng.gen_range(0..=40);
                            (0..len).map(|_| rng.gen_range(b' '..=b'~') as char).collect()
                        }
                    };
                    (format!("t{i}"), text)
                })
                .collect();
            let tokenizer = kind.create();
            let (packs, skips) = pack(&texts, &cfg, tokenizer.as_ref()).unwrap();
            assert!(skips.is_empty());
            check_pack_invariants(&packs, max_len);
            assert_eq!(unpack(&packs, tokenizer.as_ref()).unwrap(), texts);
            sets_done += 1;
        }
    }
    assert_eq!(sets_done, 10_000);
    println!("PASS criterion 3: 10000 text sets round-trip under both tokenizers");
}

/// Criterion 4: curation emits exactly the per-task cap, every survivor
/// renders under the token budget, and reruns are byte-identical.
#[test]
fn criterion_4_curation_caps_filters_and_reruns_identically() {
    let max_tokens = 40usize;
    let mut samples = Vec::new();
    for task in 0..5 {
        for i in 0..5000 {
            // One in ten questions is far over the token budget.
            let q_words = if i % 10 == 9 { 120 } else { 3 + (i % 4) };
            let mut question = String::new();
            for w in 0..q_words {
                let _ = write!(question, "{}w{task}x{i}n{w}", if w > 0 { " " } else { "" });
            }
            question.push('?');
            samples.push(Sample {
                id: format!("task{task}/{i}"),
                task: format!("task{task}"),
                question,
                options: vec![format!("opt{i}yes"), format!("opt{i}no")],
                answer_index: Some(i % 2),
                answer_text: format!("opt{i}{}", if i % 2 == 0 { "yes" } else { "no" }),
                subject: None,
                split: Default::default(),
            });
        }
    }

    let cfg = CurationConfig {
        max_tokens,
        per_task_cap: 3000,
        seed: 9,
        tokenizer: TokenizerKind::Whitespace,
    };
    let ratios = SplitRatios::new(8, 1, 1).unwrap();
    let run = |input: Vec<Sample>| {
        let (curated, report) = curate(input, &cfg, Some(&ratios)).unwrap();
        let bytes: Vec<String> =
            curated.iter().map(|s| serde_json::to_string(s).unwrap()).collect();
        (curated, report, bytes.join("\n"))
    };
    let (curated, report, bytes_a) = run(samples.clone());
    let (_, _, bytes_b) = run(samples);

    assert_eq!(bytes_a, bytes_b, "equal-seed reruns must be byte-identical");
    let tokenizer = WhitespaceTokenizer::new();
    let mut per_task: std::collections::BTreeMap<&str, usize> = Default::default();
    for s in &curated {
        *per_task.entry(s.task.as_str()).or_default() += 1;
        let rendered = teacherkit::ingest::render(s).unwrap();
        let n = tokenizer.encode(&rendered.full_text).len();
        assert!(n < max_tokens, "{}: {n} tokens", s.id);
    }
    assert_eq!(per_task.len(), 5);
    for (task, n) in per_task {
        assert_eq!(n, 3000, "{task} emitted {n}");
        assert_eq!(report[task].input, 5000);
        assert_eq!(report[task].dropped_tokens, 500);
    }
    println!("PASS criterion 4: 5x5000 corpus curates to 3000/task, byte-stable across reruns");
}

/// Criterion 5: all eight composition variants byte-match their frozen
/// goldens, with each connective appearing once per field occurrence.
#[test]
fn criterion_5_composition_goldens_match_byte_for_byte() {
    let augs = teacherkit::cli::read_augmented(&fixture("boyle_augmented.jsonl")).unwrap();
    assert_eq!(augs.len(), 1);
    let aug = &augs[0];

    for variant in CompositionVariant::ALL {
        let golden_path = fixture(&format!("goldens/{}.txt", variant.name()));
        let golden = std::fs::read_to_string(&golden_path).unwrap();
        let record = compose_record(aug, variant, 7).unwrap();
        assert_eq!(
            record.text, golden,
            "{} diverges from {}",
            variant.name(),
            golden_path.display()
        );

        for field in [FieldKind::C, FieldKind::F, FieldKind::M] {
            let expected = record.effective_order.iter().filter(|f| **f == field.letter()).count();
            let found = record.text.matches(field.connective()).count();
            assert_eq!(
                found,
                expected,
                "{}: connective {:?} count",
                variant.name(),
                field.connective()
            );
        }
    }
    println!("PASS criterion 5: 8 composition variants match frozen goldens");
}

fn run_binary(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_teacherkit"))
        .args(args)
        .output()
        .expect("binary runs")
}

/// Boost rules that make each sample's gold candidate score highest.
fn gold_boosts(samples: &[Sample]) -> Vec<BoostRule> {
    samples
        .iter()
        .map(|s| {
            let letter = (b'A' + s.answer_index.unwrap() as u8) as char;
            BoostRule {
                context_contains: s.question.clone(),
                continuation_contains: format!("The answer is ({letter})."),
                bonus: 5.0,
            }
        })
        .collect()
}

/// Criterion 6: the bundled 50-sample corpus flows through the whole
/// pipeline against the stub server; rigged gold boosts give accuracy 1.0
/// and augment output is independent of concurrency.
#[test]
fn criterion_6_end_to_end_pipeline_against_stub() {
    let started = std::time::Instant::now();
    let corpus_path = fixture("e2e_samples.jsonl");
    let corpus = teacherkit::ingest::load_jsonl(&corpus_path, true).unwrap();
    assert!(corpus.rejects.is_empty());
    assert_eq!(corpus.samples.len(), 50);

    let behavior = StubBehavior { logprob_boost: gold_boosts(&corpus.samples), ..Default::default() };
    let server = StubServer::spawn(0, 99, behavior).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config_path = dir.path().join("pipeline.toml");
    std::fs::write(
        &config_path,
        format!(
            r#"
[pipeline]
input = "{}"
out_dir = "{}"
seed = 1234
endpoint = "{}"

[curate]
cap = 3000
max_tokens = 1200
split = "8:1:1"

[augment]
kinds = "cot,fundamental,mistakes"
concurrency = 8
star = true
max_attempts = 2

[compose]
variant = "C_M_F"

[pack]
max_len = 2048
tokenizer = "byte"

[eval]
enabled = true
"#,
            corpus_path.display(),
            out_dir.display(),
            server.endpoint(),
        ),
    )
    .unwrap();

    let output = run_binary(&["pipeline", "--config", config_path.to_str().unwrap(), "--log-level", "warn"]);
    assert!(
        output.status.success(),
        "pipeline failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    for artifact in [
        "samples.jsonl",
        "curated.jsonl",
        "augmented.jsonl",
        "composed.jsonl",
        "packed.jsonl",
        "results.csv",
        "run_manifest.json",
    ] {
        assert!(out_dir.join(artifact).exists(), "missing {artifact}");
    }

    let results = std::fs::read_to_string(out_dir.join("results.csv")).unwrap();
    let macro_line = results
        .lines()
        .find(|l| l.starts_with("macro_average"))
        .expect("macro_average row present");
    assert_eq!(macro_line, "macro_average,,,1", "rigged eval must be perfect: {results}");

    // Augment output must not depend on worker count.
    let curated = out_dir.join("curated.jsonl");
    let mut augmented = Vec::new();
    for concurrency in ["1", "8"] {
        let path = dir.path().join(format!("augmented_c{concurrency}.jsonl"));
        let output = run_binary(&[
            "augment",
            "--input",
            curated.to_str().unwrap(),
            "--endpoint",
            &server.endpoint(),
            "--kinds",
            "cot,fundamental,mistakes",
            "--star",
            "--seed",
            "1234",
            "--concurrency",
            concurrency,
            "--out",
            path.to_str().unwrap(),
            "--log-level",
            "warn",
        ]);
        assert!(
            output.status.success(),
            "augment -j{concurrency} failed: {}",
            String::from_utf8_lossy(&output.stderr)
        );
        augmented.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(augmented[0], augmented[1], "concurrency changed augment bytes");
    assert!(!augmented[0].is_empty());

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 120, "end-to-end took {elapsed:?}");
    println!("PASS criterion 6: pipeline e2e in {elapsed:?}, eval accuracy 1.0, concurrency-stable");
}

/// Criterion 7: a teacher that answers wrong k times is accepted on the
/// k+1th attempt unhinted, and rationalized exactly at the attempt cap.
#[test]
fn criterion_7_star_attempt_accounting_is_sound() {
    let sample = Sample {
        id: "star/probe".into(),
        task: "quiz".into(),
        question: "Does the marker float?".into(),
        options: vec!["floats".into(), "sinks".into()],
        answer_index: Some(0),
        answer_text: "floats".into(),
        subject: None,
        split: Default::default(),
    };
    let cfg = StarConfig { enabled: true, max_attempts: 2, ..StarConfig::default() };
    let wrong = "Weighing it quickly. So the answer is (B).".to_string();
    let right = "Weighing it quickly. So the answer is (A).".to_string();

    for k in 0..=2u32 {
        let mut responses: Vec<String> = vec![wrong.clone(); k as usize];
        responses.push(if k < cfg.max_attempts { right.clone() } else { wrong.clone() });
        let behavior = StubBehavior {
            generate: vec![GenerateRule {
                prompt_contains: vec!["Does the marker float?".into()],
                responses,
            }],
            ..Default::default()
        };
        let server = StubServer::spawn(0, 5, behavior).unwrap();
        let backend = HttpBackend::new(&server.endpoint());
        let params = GenParams { seed: Some(10), ..Default::default() };

        let explanation = star_filter(&sample, &backend, &params, &cfg).unwrap();
        if k < cfg.max_attempts {
            assert_eq!(explanation.attempts, k + 1, "k={k}");
            assert!(!explanation.rationalized, "k={k}");
        } else {
            assert_eq!(explanation.attempts, cfg.max_attempts + 1, "k={k}");
            assert!(explanation.rationalized, "k={k}");
        }
    }
    println!("PASS criterion 7: STaR attempts and rationalization sound for k in 0..=2");
}

struct OffsetBackend<B>(B, f64);

impl<B: Backend> Backend for OffsetBackend<B> {
    fn generate(&self, prompt: &str, params: &GenParams) -> Result<String, BackendError> {
        self.0.generate(prompt, params)
    }
    fn continuation_logprobs(&self, context: &str, continuation: &str) -> Result<Vec<f64>, BackendError> {
        Ok(self.0.continuation_logprobs(context, continuation)?.iter().map(|lp| lp + self.1).collect())
    }
    fn backend_id(&self) -> String {
        self.0.backend_id()
    }
}

/// Criterion 8: adding a constant to every token logprob never moves the
/// argmax. Items are built with strictly distinct candidate means so the
/// assertion is exact, not tie-dependent.
#[test]
fn criterion_8_constant_logprob_offsets_never_change_the_choice() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..500 {
        let n = rng.gen_range(2..=6);
        let mut shapes = BTreeSet::new();
        while shapes.len() < n {
            // Single length class per candidate: mean = -(len)/10, so
            // distinct lengths mean distinct scores.
            shapes.insert(rng.gen_range(1usize..=8));
        }
        let candidates: Vec<String> = shapes
            .iter()
            .map(|&len| {
                let n_tokens = rng.gen_range(1..=4);
                let word: String = (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
                vec![word; n_tokens].join(" ")
            })
            .collect();
        let item = EvalItem {
            id: format!("shift{case}"),
            task: "shift".into(),
            prompt: format!("Q: {} A:", random_words(&mut rng, 4)),
            candidates,
            gold_index: 0,
        };
        let (base_choice, _) = rank_classify(&item, &MockBackend::new(1)).unwrap();
        for c in [-5.0, 0.001, 17.0] {
            let (shifted, _) = rank_classify(&item, &OffsetBackend(MockBackend::new(1), c)).unwrap();
            assert_eq!(shifted, base_choice, "case {case}, offset {c}");
        }
    }
    println!("PASS criterion 8: offsets in {{-5, 0.001, 17}} preserve 500 argmax choices");
}
