//! HTTP client for logprob-capable completion endpoints.
//!
//! The wire shape is the completion API convention: a POST carrying the
//! model name, a prompt, and a `logprobs` count, answered by choices whose
//! `logprobs` block lists tokens, chosen-token logprobs, per-token top-k
//! alternative logprobs, and byte offsets. Teacher-forced scoring sends the
//! prompt and the continuation concatenated with `echo` on and zero new
//! tokens, then reads the continuation's region out of the echoed
//! logprobs. Endpoints speaking a different dialect get an adapter in front
//! of this module; nothing downstream changes.
//!
//! Requests run under a fixed in-flight cap and a per-request timeout.
//! Transient failures (transport errors, 408/429/5xx) are retried with
//! exponential backoff; scoring and generation are idempotent under greedy
//! decoding, so retries never duplicate side effects.

use std::collections::BTreeMap;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use obeval_core::trace::{ScoredTrace, TokenStep};

use crate::{apply_stop, BackendConfig, BackendError, GenerationOutput, GenerationParams, ModelBackend};

#[derive(Debug, Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f32,
    logprobs: u32,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    echo: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    stop: Option<&'a [String]>,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    #[serde(default)]
    text: String,
    logprobs: Option<LogprobBlock>,
}

#[derive(Debug, Deserialize)]
struct LogprobBlock {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    top_logprobs: Option<Vec<Option<BTreeMap<String, f64>>>>,
    #[serde(default)]
    text_offset: Option<Vec<usize>>,
}

pub struct HttpBackend {
    config: BackendConfig,
    client: reqwest::Client,
    api_key: Option<String>,
    inflight: Semaphore,
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::InvalidConfig(format!(
                    "API key environment variable `{var}` is not set"
                ))
            })?),
            None => None,
        };
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::InvalidConfig(e.to_string()))?;
        let inflight = Semaphore::new(config.max_inflight);
        Ok(Self {
            config,
            client,
            api_key,
            inflight,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn retryable_status(status: u16) -> bool {
        status == 408 || status == 429 || (500..600).contains(&status)
    }

    /// POST with bounded concurrency, retrying transient failures.
    async fn post(&self, request: &CompletionRequest<'_>) -> Result<CompletionResponse, BackendError> {
        let _permit = self
            .inflight
            .acquire()
            .await
            .expect("in-flight semaphore is never closed");
        let mut last_reason = String::new();
        let max_attempts = self.config.retry.max_attempts;
        for attempt in 0..max_attempts {
            if attempt > 0 {
                let backoff = self.config.retry.backoff_base_ms << (attempt - 1);
                tokio::time::sleep(Duration::from_millis(backoff)).await;
            }
            let mut builder = self.client.post(&self.config.endpoint).json(request);
            if let Some(key) = &self.api_key {
                builder = builder.bearer_auth(key);
            }
            match builder.send().await {
                Ok(response) => {
                    let status = response.status().as_u16();
                    if status == 200 {
                        return response
                            .json::<CompletionResponse>()
                            .await
                            .map_err(|e| BackendError::Protocol(format!("bad response body: {e}")));
                    }
                    let body = response.text().await.unwrap_or_default();
                    if !Self::retryable_status(status) {
                        return Err(BackendError::Http { status, body });
                    }
                    last_reason = format!("HTTP {status}: {body}");
                }
                Err(e) => {
                    last_reason = e.to_string();
                }
            }
        }
        Err(BackendError::Transport {
            attempts: max_attempts,
            reason: last_reason,
        })
    }
}

#[async_trait]
impl ModelBackend for HttpBackend {
    fn identity(&self) -> String {
        format!("http:{}#{}", self.config.endpoint, self.config.model)
    }

    fn top_k(&self) -> u32 {
        self.config.top_k
    }

    async fn score_answer(
        &self,
        prompt: &str,
        answer: &str,
    ) -> Result<ScoredTrace, BackendError> {
        if answer.is_empty() {
            return Err(BackendError::Domain("cannot score an empty answer".into()));
        }
        let full = format!("{prompt}{answer}");
        let request = CompletionRequest {
            model: &self.config.model,
            prompt: &full,
            max_tokens: 0,
            temperature: 0.0,
            logprobs: self.config.top_k,
            echo: true,
            stop: None,
        };
        let response = self.post(&request).await?;
        let choice = response
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Protocol("response has no choices".into()))?;
        let block = choice.logprobs.ok_or_else(|| {
            BackendError::Capability(
                "endpoint did not return logprobs for an echoed continuation".into(),
            )
        })?;
        let offsets = block.text_offset.as_ref().ok_or_else(|| {
            BackendError::Capability(
                "endpoint did not report text offsets; cannot locate the scored continuation"
                    .into(),
            )
        })?;
        if offsets.len() != block.tokens.len() || block.token_logprobs.len() != block.tokens.len()
        {
            return Err(BackendError::Protocol(
                "logprob arrays disagree in length".into(),
            ));
        }
        let boundary = prompt.len();
        let start = offsets.partition_point(|&offset| offset < boundary);
        if start == offsets.len() {
            return Err(BackendError::Capability(
                "echo region contains no continuation tokens".into(),
            ));
        }
        if offsets[start] != boundary {
            return Err(BackendError::Protocol(format!(
                "tokenization straddles the prompt/answer boundary (offset {} vs {})",
                offsets[start], boundary
            )));
        }
        let answer_tokens: Vec<String> = block.tokens[start..].to_vec();
        if answer_tokens.concat() != answer {
            return Err(BackendError::Protocol(
                "echoed continuation tokens do not reassemble the answer".into(),
            ));
        }
        let mut steps = Vec::with_capacity(answer_tokens.len());
        for (index, token) in answer_tokens.iter().enumerate() {
            let position = start + index;
            let logprob = block.token_logprobs[position].ok_or_else(|| {
                BackendError::Protocol(format!(
                    "forced-token logprob missing at continuation step {index}"
                ))
            })?;
            let mut alternatives: Vec<(String, f64)> = block
                .top_logprobs
                .as_ref()
                .and_then(|tops| tops.get(position))
                .and_then(|entry| entry.as_ref())
                .map(|map| {
                    map.iter()
                        .filter(|(t, _)| t.as_str() != token.as_str())
                        .map(|(t, lp)| (t.clone(), lp.exp()))
                        .collect()
                })
                .unwrap_or_default();
            alternatives.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            alternatives.truncate(self.config.top_k as usize);
            let named: BTreeMap<String, f64> = alternatives.into_iter().collect();
            let forced_prob = logprob.exp();
            let named_mass: f64 = named.values().sum();
            let residual = 1.0 - forced_prob - named_mass;
            if residual < -1e-6 {
                return Err(BackendError::Protocol(format!(
                    "reported probabilities at step {index} exceed unit mass by {}",
                    -residual
                )));
            }
            steps.push(TokenStep::from_logprob(
                token.clone(),
                logprob,
                named,
                residual.max(0.0),
            )?);
        }
        Ok(ScoredTrace::new(answer_tokens, steps, "scored")?)
    }

    async fn generate(
        &self,
        prompt: &str,
        params: &GenerationParams,
    ) -> Result<GenerationOutput, BackendError> {
        let request = CompletionRequest {
            model: &self.config.model,
            prompt,
            max_tokens: params.max_new_tokens,
            temperature: 0.0,
            logprobs: 0,
            echo: false,
            stop: if params.stop.is_empty() {
                None
            } else {
                Some(&params.stop)
            },
        };
        let response = self.post(&request).await?;
        let choice = response
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Protocol("response has no choices".into()))?;
        // The endpoint may already have applied the stop sequences; cutting
        // again is a no-op in that case.
        let stopped = apply_stop(&choice.text, &params.stop);
        let text = stopped.trim().to_string();
        if text.is_empty() {
            return Err(BackendError::EmptyGeneration);
        }
        let token_probs = match choice.logprobs {
            Some(block) => {
                // Keep probabilities for tokens that fall entirely within
                // the stop-truncated text.
                let mut kept = Vec::new();
                let mut consumed = 0usize;
                for (token, logprob) in block.tokens.iter().zip(&block.token_logprobs) {
                    if consumed + token.len() > stopped.len() {
                        break;
                    }
                    consumed += token.len();
                    match logprob {
                        Some(lp) => kept.push(lp.exp()),
                        None => {
                            kept.clear();
                            break;
                        }
                    }
                }
                kept
            }
            None => Vec::new(),
        };
        Ok(GenerationOutput { text, token_probs })
    }
}
