//! teacherkit builds explanation-augmented training corpora and evaluates
//! models by rank classification.
//!
//! The pipeline stages mirror the binary's subcommands:
//!
//! 1. [`ingest`] loads raw samples (JSONL or MMLU-style CSV) and renders them
//!    into canonical prompt/answer text.
//! 2. [`curate`] filters by token length, caps per-task sample counts, and
//!    assigns train/validation/test splits. All selection is seeded.
//! 3. [`teacher`] asks an inference backend for explanations (chain of
//!    thought, fundamentals, common mistakes), optionally gated by an
//!    accept-or-rationalize check on the chain of thought.
//! 4. [`compose`] splices explanation fields onto the rendered text in a
//!    named field order.
//! 5. [`pack`] concatenates tokenized texts into fixed-length sequences with
//!    segment and position ids suitable for packed-attention training.
//! 6. [`eval`] scores answer candidates by mean token log-probability and
//!    aggregates per-task accuracy into a macro average.
//! 7. [`report`] renders corpus statistics and evaluation results as
//!    Markdown or CSV.
//!
//! Backends speak a small JSON-over-HTTP protocol (see [`teacher::http`]);
//! [`teacher::stub`] provides a deterministic in-process server for tests and
//! offline runs, and [`core::MockBackend`] a zero-IO stand-in.

pub mod cli;
pub mod compose;
pub mod core;
pub mod curate;
pub mod eval;
pub mod ingest;
pub mod pack;
pub mod report;
pub mod teacher;

pub(crate) mod seeded;
