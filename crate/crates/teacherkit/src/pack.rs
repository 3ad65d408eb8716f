//! Packs tokenized texts into fixed-length training sequences.
//!
//! Texts are placed greedily in input order, each followed by one terminator
//! token that carries the text's segment id. Attention isolation is encoded
//! as segment ids (a consumer masks attention between positions whose ids
//! differ) and position ids restart at 0 on every segment. Texts are never
//! split across packs.
//!
//! Terminators belong to the text before them and are meant to take loss
//! with it; a trainer wanting loss-free terminators can mask on
//! `tokens[i] == terminator && segment_ids[i] >= 0` instead. Padding (only
//! ever in the final pack, when enabled) uses the reserved segment id -1 and
//! is always excluded from loss and attention.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::{TokenId, Tokenizer, TokenizerKind};

/// Segment id reserved for padding tokens.
pub const PAD_SEGMENT_ID: i32 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlongPolicy {
    /// A text longer than max_len - 1 tokens fails the whole run.
    Error,
    /// Overlong texts are dropped into the skip ledger.
    Skip,
}

impl std::str::FromStr for OverlongPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "error" => Ok(OverlongPolicy::Error),
            "skip" => Ok(OverlongPolicy::Skip),
            other => Err(format!("unknown overlong policy {other:?} (expected error or skip)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackConfig {
    pub max_len: usize,
    /// Which tokenizer the token ids came from. Recorded in the manifest;
    /// the pack/unpack functions take the instance explicitly so both ends
    /// share one vocabulary.
    pub tokenizer: TokenizerKind,
    /// Pad the final pack to max_len with terminators at segment id -1.
    pub pad_final: bool,
    pub on_overlong: OverlongPolicy,
}

impl PackConfig {
    pub fn validate(&self) -> Result<(), PackError> {
        if self.max_len < 2 {
            return Err(PackError::InvalidConfig(
                "max_len must be >= 2 (one token plus terminator)".into(),
            ));
        }
        Ok(())
    }
}

/// Where one source text sits inside a pack. `len` counts the text's tokens
/// plus its terminator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocSpan {
    pub id: String,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedSequence {
    pub tokens: Vec<TokenId>,
    pub segment_ids: Vec<i32>,
    pub position_ids: Vec<u32>,
    pub docs: Vec<DocSpan>,
}

impl PackedSequence {
    /// Materializes the causal block-diagonal attention mask implied by the
    /// segment ids: `mask[q][k]` is true when position q may attend k.
    /// Intended for tests and small packs; training consumers should use the
    /// segment ids directly.
    pub fn dense_attention_mask(&self) -> Vec<Vec<bool>> {
        let n = self.tokens.len();
        (0..n)
            .map(|q| {
                (0..n)
                    .map(|k| {
                        k <= q
                            && self.segment_ids[q] == self.segment_ids[k]
                            && self.segment_ids[q] != PAD_SEGMENT_ID
                    })
                    .collect()
            })
            .collect()
    }
}

/// A text that did not fit under the skip policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackSkip {
    pub id: String,
    pub n_tokens: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PackError {
    #[error("text {id} needs {n_tokens} tokens, over the max_len {max_len} budget")]
    OverlongText { id: String, n_tokens: usize, max_len: usize },
    #[error("pack {index}: {reason}")]
    MalformedPack { index: usize, reason: String },
    #[error("invalid pack config: {0}")]
    InvalidConfig(String),
}

/// Greedily fills packs in input order. The tokenizer must be the
/// implementation `cfg.tokenizer` names.
pub fn pack(
    texts: &[(String, String)],
    cfg: &PackConfig,
    tokenizer: &dyn Tokenizer,
) -> Result<(Vec<PackedSequence>, Vec<PackSkip>), PackError> {
    cfg.validate()?;
    let terminator = tokenizer.terminator_id();

    let mut packs: Vec<PackedSequence> = Vec::new();
    let mut skips: Vec<PackSkip> = Vec::new();
    let mut current = PackedSequence::default();
    let mut next_segment: i32 = 0;

    for (id, text) in texts {
        let tokens = tokenizer.encode(text);
        let need = tokens.len() + 1;
        if need > cfg.max_len {
            match cfg.on_overlong {
                OverlongPolicy::Error => {
                    return Err(PackError::OverlongText {
                        id: id.clone(),
                        n_tokens: need,
                        max_len: cfg.max_len,
                    });
                }
                OverlongPolicy::Skip => {
                    log::warn!("skipping overlong text {id} ({} tokens)", tokens.len());
                    skips.push(PackSkip { id: id.clone(), n_tokens: tokens.len() });
                    continue;
                }
            }
        }
        if current.tokens.len() + need > cfg.max_len {
            packs.push(std::mem::take(&mut current));
            next_segment = 0;
        }

        let start = current.tokens.len();
        for (position, &token) in tokens.iter().chain(std::iter::once(&terminator)).enumerate() {
            current.tokens.push(token);
            current.segment_ids.push(next_segment);
            current.position_ids.push(position as u32);
        }
        current.docs.push(DocSpan { id: id.clone(), start, len: need });
        next_segment += 1;
    }
    if !current.tokens.is_empty() {
        packs.push(current);
    }

    if cfg.pad_final {
        if let Some(last) = packs.last_mut() {
            let mut position = 0u32;
            while last.tokens.len() < cfg.max_len {
                last.tokens.push(terminator);
                last.segment_ids.push(PAD_SEGMENT_ID);
                last.position_ids.push(position);
                position += 1;
            }
        }
    }

    Ok((packs, skips))
}

/// Recovers `(id, text)` pairs from packs, validating the pack invariants
/// along the way.
pub fn unpack(
    packs: &[PackedSequence],
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<(String, String)>, PackError> {
    let terminator = tokenizer.terminator_id();
    let mut out = Vec::new();

    for (index, pack) in packs.iter().enumerate() {
        let malformed = |reason: String| PackError::MalformedPack { index, reason };

        let n = pack.tokens.len();
        if pack.segment_ids.len() != n || pack.position_ids.len() != n {
            return Err(malformed(format!(
                "length mismatch: {} tokens, {} segment_ids, {} position_ids",
                n,
                pack.segment_ids.len(),
                pack.position_ids.len()
            )));
        }

        // Split off the trailing padding region, if any.
        let mut data_end = n;
        while data_end > 0 && pack.segment_ids[data_end - 1] == PAD_SEGMENT_ID {
            data_end -= 1;
        }
        for (k, &seg) in pack.segment_ids[..data_end].iter().enumerate() {
            if seg < 0 {
                return Err(malformed(format!("segment id {seg} at {k} before the pad region")));
            }
        }
        for (offset, k) in (data_end..n).enumerate() {
            if pack.tokens[k] != terminator {
                return Err(malformed(format!("padding token at {k} is not the terminator")));
            }
            if pack.position_ids[k] != offset as u32 {
                return Err(malformed(format!("padding position at {k} does not restart at 0")));
            }
        }

        // Walk the data region segment by segment.
        let mut segments: Vec<(usize, usize)> = Vec::new();
        let mut segment_start = 0usize;
        for k in 0..data_end {
            let fresh = k == 0 || pack.segment_ids[k] != pack.segment_ids[k - 1];
            if fresh {
                if k > 0 {
                    segments.push((segment_start, k));
                }
                segment_start = k;
                let expected = segments.len() as i32;
                if pack.segment_ids[k] != expected {
                    return Err(malformed(format!(
                        "segment id {} at {k}, expected {expected}",
                        pack.segment_ids[k]
                    )));
                }
                if pack.position_ids[k] != 0 {
                    return Err(malformed(format!("position does not reset at segment start {k}")));
                }
            } else if pack.position_ids[k] != pack.position_ids[k - 1] + 1 {
                return Err(malformed(format!("position does not advance by 1 at {k}")));
            }
        }
        if data_end > 0 {
            segments.push((segment_start, data_end));
        }

        if segments.len() != pack.docs.len() {
            return Err(malformed(format!(
                "{} segments but {} doc spans",
                segments.len(),
                pack.docs.len()
            )));
        }
        for (doc, &(start, stop)) in pack.docs.iter().zip(&segments) {
            if doc.start != start || doc.len != stop - start {
                return Err(malformed(format!(
                    "doc {} span ({}, {}) does not match segment ({start}, {})",
                    doc.id,
                    doc.start,
                    doc.len,
                    stop - start
                )));
            }
            if pack.tokens[stop - 1] != terminator {
                return Err(malformed(format!("segment ending at {stop} lacks a terminator")));
            }
            let text = tokenizer
                .decode(&pack.tokens[start..stop - 1])
                .map_err(|e| malformed(format!("doc {}: {e}", doc.id)))?;
            out.push((doc.id.clone(), text));
        }
    }
    Ok(out)
}

/// Summary statistics for a packing run, written next to packed.jsonl.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackManifest {
    pub config: PackConfig,
    pub n_texts: usize,
    pub n_packed: usize,
    pub n_skipped: usize,
    pub n_packs: usize,
    /// Tokens across all packs, padding included.
    pub total_tokens: usize,
    /// Tokens belonging to texts and their terminators.
    pub text_tokens: usize,
    pub padding_tokens: usize,
    /// text_tokens over the full budget n_packs * max_len.
    pub utilization: f64,
    /// Opaque run labels (e.g. learning-rate/batch pairs) for downstream
    /// training bookkeeping.
    pub training_hints: Vec<String>,
}

pub fn manifest(
    packs: &[PackedSequence],
    skips: &[PackSkip],
    cfg: &PackConfig,
    training_hints: Vec<String>,
) -> PackManifest {
    let total_tokens: usize = packs.iter().map(|p| p.tokens.len()).sum();
    let padding_tokens: usize = packs
        .iter()
        .flat_map(|p| &p.segment_ids)
        .filter(|&&s| s == PAD_SEGMENT_ID)
        .count();
    let n_packed: usize = packs.iter().map(|p| p.docs.len()).sum();
    let budget = packs.len() * cfg.max_len;
    PackManifest {
        config: cfg.clone(),
        n_texts: n_packed + skips.len(),
        n_packed,
        n_skipped: skips.len(),
        n_packs: packs.len(),
        total_tokens,
        text_tokens: total_tokens - padding_tokens,
        padding_tokens,
        utilization: if budget == 0 {
            0.0
        } else {
            (total_tokens - padding_tokens) as f64 / budget as f64
        },
        training_hints,
    }
}
