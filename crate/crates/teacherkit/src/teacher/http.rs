//! JSON-over-HTTP backend client.
//!
//! Wire protocol, UTF-8 JSON both ways:
//!
//! ```text
//! POST /v1/generate  {"prompt", "max_new_tokens", "temperature", "stop", "seed"}
//!                 -> 200 {"text"}
//! POST /v1/logprobs  {"context", "continuation"}
//!                 -> 200 {"token_logprobs": [f64], "tokens": [str]}
//! errors          -> 4xx/5xx {"error"}
//! ```
//!
//! Transport failures and 5xx responses are retried with exponential
//! backoff; 4xx responses are returned to the caller immediately.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::core::{Backend, BackendError, GenParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub max_new_tokens: u32,
    pub temperature: f64,
    pub stop: Vec<String>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogprobsRequest {
    pub context: String,
    pub continuation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogprobsResponse {
    pub token_logprobs: Vec<f64>,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Retries after the first attempt, so a request is sent at most
    /// `max_retries + 1` times.
    pub max_retries: u32,
    /// Delay before retry k is `base_backoff * 2^(k-1)`.
    pub base_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_backoff: Duration::from_millis(250),
        }
    }
}

/// Blocking HTTP client for the wire protocol above. Cheap to clone is not
/// needed; one instance is shared across the augmenter's worker threads.
pub struct HttpBackend {
    endpoint: String,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
}

impl HttpBackend {
    pub fn new(endpoint: &str) -> Self {
        Self::with_retry(endpoint, RetryPolicy::default())
    }

    pub fn with_retry(endpoint: &str, retry: RetryPolicy) -> Self {
        HttpBackend {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(120))
                .build()
                .expect("default TLS backend available"),
            retry,
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn post_json<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        path: &str,
        request: &Req,
    ) -> Result<Resp, BackendError> {
        let url = format!("{}{path}", self.endpoint);
        let mut attempt = 0u32;
        loop {
            match self.post_once(&url, request) {
                Ok(response) => return Ok(response),
                Err(error) if error.is_retryable() && attempt < self.retry.max_retries => {
                    let delay = self.retry.base_backoff * 2u32.saturating_pow(attempt);
                    attempt += 1;
                    log::warn!(
                        "{url}: {error}; retry {attempt}/{} in {delay:?}",
                        self.retry.max_retries
                    );
                    std::thread::sleep(delay);
                }
                Err(error) => return Err(error),
            }
        }
    }

    fn post_once<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        url: &str,
        request: &Req,
    ) -> Result<Resp, BackendError> {
        let response = self
            .client
            .post(url)
            .json(request)
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let message = match response.json::<ErrorBody>() {
                Ok(body) => body.error,
                Err(_) => status.canonical_reason().unwrap_or("unknown").to_string(),
            };
            return Err(BackendError::Http {
                status: status.as_u16(),
                message,
            });
        }
        response
            .json()
            .map_err(|e| BackendError::InvalidResponse(e.to_string()))
    }
}

impl Backend for HttpBackend {
    fn generate(&self, prompt: &str, params: &GenParams) -> Result<String, BackendError> {
        let request = GenerateRequest {
            prompt: prompt.to_string(),
            max_new_tokens: params.max_new_tokens,
            temperature: params.temperature,
            stop: params.stop.clone(),
            seed: params.seed,
        };
        let response: GenerateResponse = self.post_json("/v1/generate", &request)?;
        Ok(response.text)
    }

    fn continuation_logprobs(
        &self,
        context: &str,
        continuation: &str,
    ) -> Result<Vec<f64>, BackendError> {
        let request = LogprobsRequest {
            context: context.to_string(),
            continuation: continuation.to_string(),
        };
        let response: LogprobsResponse = self.post_json("/v1/logprobs", &request)?;
        if response.token_logprobs.len() != response.tokens.len() {
            return Err(BackendError::InvalidResponse(format!(
                "{} logprobs for {} tokens",
                response.token_logprobs.len(),
                response.tokens.len()
            )));
        }
        Ok(response.token_logprobs)
    }

    fn backend_id(&self) -> String {
        self.endpoint.clone()
    }
}
