use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::tokenizer::{Tokenizer, WhitespaceTokenizer, TERMINATOR_SENTINEL};

/// Decoding parameters passed through to a generation backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub max_new_tokens: u32,
    pub temperature: f64,
    pub stop: Vec<String>,
    pub seed: Option<u64>,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            max_new_tokens: 512,
            temperature: 0.0,
            stop: vec![TERMINATOR_SENTINEL.to_string()],
            seed: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    /// The server was reached but answered with an error status.
    #[error("backend returned status {status}: {message}")]
    Http { status: u16, message: String },
    /// The server could not be reached (connect, timeout, mid-stream drop).
    #[error("transport error: {0}")]
    Transport(String),
    /// A 200 response that does not match the wire contract.
    #[error("invalid backend response: {0}")]
    InvalidResponse(String),
}

impl BackendError {
    /// Transport failures and server-side (5xx) statuses are worth retrying;
    /// client-side statuses and malformed payloads are not.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Http { status, .. } => *status >= 500,
            BackendError::InvalidResponse(_) => false,
        }
    }
}

/// A text-generation service that can also score fixed continuations.
///
/// Implementations must be safe to call from several threads at once; the
/// corpus augmenter fans its requests out over a worker pool.
pub trait Backend: Send + Sync {
    fn generate(&self, prompt: &str, params: &GenParams) -> Result<String, BackendError>;

    /// Per-token log-probabilities of `continuation` given `context`,
    /// scored left to right. One value per continuation token.
    fn continuation_logprobs(
        &self,
        context: &str,
        continuation: &str,
    ) -> Result<Vec<f64>, BackendError>;

    /// Stable identifier recorded as the `source` of generated explanations.
    fn backend_id(&self) -> String;
}

/// In-process backend for tests and dry runs. Never fails, never does IO.
///
/// `generate` answers with a fixed template: a tag derived from the seed and
/// a hash of the full request, followed by an echo of the prompt's first
/// words. `continuation_logprobs` assigns each token a log-probability of
/// -0.1 per character of its decoded text (tokens that do not decode count
/// as one replacement character).
pub struct MockBackend {
    seed: u64,
    tokenizer: Box<dyn Tokenizer>,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        MockBackend {
            seed,
            tokenizer: Box::new(WhitespaceTokenizer::new()),
        }
    }

    pub fn with_tokenizer(seed: u64, tokenizer: Box<dyn Tokenizer>) -> Self {
        MockBackend { seed, tokenizer }
    }
}

pub(crate) fn short_hash(parts: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part);
    }
    let digest = hasher.finalize();
    digest[..4].iter().map(|b| format!("{b:02x}")).collect()
}

impl Backend for MockBackend {
    fn generate(&self, prompt: &str, params: &GenParams) -> Result<String, BackendError> {
        let request = format!(
            "{prompt}\u{0}{}\u{0}{}\u{0}{:?}",
            params.max_new_tokens, params.temperature, params.seed
        );
        let tag = short_hash(&[&self.seed.to_le_bytes(), request.as_bytes()]);
        let head: Vec<&str> = prompt.split_whitespace().take(3).collect();
        Ok(format!("mock[{}:{}] {}", self.seed, tag, head.join(" ")))
    }

    fn continuation_logprobs(
        &self,
        _context: &str,
        continuation: &str,
    ) -> Result<Vec<f64>, BackendError> {
        Ok(self
            .tokenizer
            .encode(continuation)
            .into_iter()
            .map(|id| {
                let chars = match self.tokenizer.decode(&[id]) {
                    Ok(text) => text.chars().count(),
                    Err(_) => 1,
                };
                // One tenth per character, computed as a division so the
                // result is the shortest decimal (3 chars score exactly -0.3).
                -(chars as f64) / 10.0
            })
            .collect())
    }

    fn backend_id(&self) -> String {
        format!("mock-{}", self.seed)
    }
}
