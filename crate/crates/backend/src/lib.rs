//! Uniform model interface for teacher-forced scoring and greedy generation.
//!
//! Two implementations exist behind [`ModelBackend`]: [`http::HttpBackend`]
//! talks to a completion-style HTTP endpoint that can return per-token
//! logprobs for an echoed continuation, and [`synthetic::SyntheticBackend`]
//! is a deterministic in-process oracle whose certainty response is a known
//! closed form, used for testing and acceptance checks.
//!
//! Decoding is fixed to greedy (temperature 0) throughout: scoring and
//! generation are then idempotent requests, which is what makes response
//! caching and retries sound.

#![forbid(unsafe_code)]

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use obeval_core::trace::{ScoredTrace, TraceError};

pub mod http;
pub mod synthetic;

pub use http::HttpBackend;
pub use synthetic::{synthetic_observed, Distortion, SyntheticBackend, SyntheticModelSpec};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s): {reason}")]
    Transport { attempts: u32, reason: String },
    #[error("endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("endpoint lacks a required capability: {0}")]
    Capability(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("backend produced an empty completion")]
    EmptyGeneration,
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid backend configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// Retry policy for transient transport failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub max_attempts: u32,
    /// Base backoff in milliseconds; attempt `n` waits `base * 2^n`.
    pub backoff_base_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_base_ms: 250,
        }
    }
}

/// Configuration of an HTTP scoring endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    /// Full URL of the completions route, e.g. `http://host:8000/v1/completions`.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the API key; sent as a bearer token
    /// when set. The key itself never appears in configuration files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    /// Named alternatives requested per step. The residual bucket keeps
    /// correctness independent of this; only the tightness of the distance
    /// lower bound varies.
    #[serde(default = "default_top_k")]
    pub top_k: u32,
    #[serde(default = "default_max_inflight")]
    pub max_inflight: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_top_k() -> u32 {
    5
}

fn default_max_inflight() -> usize {
    4
}

fn default_timeout_secs() -> f64 {
    60.0
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.endpoint.trim().is_empty() {
            return Err(BackendError::InvalidConfig("endpoint is empty".into()));
        }
        if self.model.trim().is_empty() {
            return Err(BackendError::InvalidConfig("model name is empty".into()));
        }
        if self.max_inflight < 1 {
            return Err(BackendError::InvalidConfig(
                "max_inflight must be at least 1".into(),
            ));
        }
        if self.timeout_secs <= 0.0 || self.timeout_secs.is_nan() {
            return Err(BackendError::InvalidConfig(
                "timeout must be positive".into(),
            ));
        }
        if self.retry.max_attempts < 1 {
            return Err(BackendError::InvalidConfig(
                "retry.max_attempts must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Greedy-generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub max_new_tokens: u32,
    #[serde(default)]
    pub stop: Vec<String>,
}

impl GenerationParams {
    pub fn new(max_new_tokens: u32) -> Result<Self, BackendError> {
        if max_new_tokens < 1 {
            return Err(BackendError::InvalidConfig(
                "max_new_tokens must be at least 1".into(),
            ));
        }
        Ok(Self {
            max_new_tokens,
            stop: Vec::new(),
        })
    }

    pub fn with_stop(mut self, stop: Vec<String>) -> Self {
        self.stop = stop;
        self
    }
}

/// A greedy completion: the trimmed text plus the chosen-token
/// probabilities of the kept tokens. Under greedy decoding the product of
/// these probabilities equals the chain-rule probability of teacher-forcing
/// the same text back through the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutput {
    pub text: String,
    pub token_probs: Vec<f64>,
}

impl GenerationOutput {
    /// Chain-rule probability of the generated text, when the endpoint
    /// reported per-token probabilities.
    pub fn chain_probability(&self) -> Option<f64> {
        if self.token_probs.is_empty() {
            None
        } else {
            Some(self.token_probs.iter().product())
        }
    }
}

/// The uniform model interface. Implementations must be safely callable
/// from multiple workers concurrently; nothing beyond an in-flight cap may
/// be serialized.
#[async_trait]
pub trait ModelBackend: Send + Sync {
    /// Stable identity string, used in cache keys and run manifests.
    fn identity(&self) -> String;

    /// The named-alternatives budget per scoring step.
    fn top_k(&self) -> u32;

    /// Teacher-force `answer` after `prompt`, returning the backend's
    /// tokenization of the answer with, per step, the forced token's exact
    /// probability, up to `top_k` named alternatives, and the residual.
    async fn score_answer(&self, prompt: &str, answer: &str)
        -> Result<ScoredTrace, BackendError>;

    /// Greedy completion, truncated at a stop sequence or the token cap and
    /// whitespace-trimmed.
    async fn generate(
        &self,
        prompt: &str,
        params: &GenerationParams,
    ) -> Result<GenerationOutput, BackendError>;
}

/// Serializable choice of backend, as carried in service requests and run
/// manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendSelection {
    Http(BackendConfig),
    Synthetic {
        spec: SyntheticModelSpec,
        #[serde(default = "default_top_k")]
        top_k: u32,
    },
}

impl BackendSelection {
    /// Construct the backend this selection describes.
    pub fn build(&self) -> Result<std::sync::Arc<dyn ModelBackend>, BackendError> {
        match self {
            BackendSelection::Http(config) => Ok(std::sync::Arc::new(HttpBackend::new(
                config.clone(),
            )?)),
            BackendSelection::Synthetic { spec, top_k } => Ok(std::sync::Arc::new(
                SyntheticBackend::new(spec.clone(), *top_k)?,
            )),
        }
    }
}

/// Truncate generated text at the first occurrence of any stop sequence.
pub(crate) fn apply_stop(text: &str, stop: &[String]) -> String {
    let mut cut = text.len();
    for sequence in stop {
        if sequence.is_empty() {
            continue;
        }
        if let Some(position) = text.find(sequence.as_str()) {
            cut = cut.min(position);
        }
    }
    text[..cut].to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stop_truncation() {
        assert_eq!(apply_stop("Answer: Paris\nmore", &["\n".to_string()]), "Answer: Paris");
        assert_eq!(apply_stop("no stop here", &["\n".to_string()]), "no stop here");
        assert_eq!(
            apply_stop("a|b;c", &["|".to_string(), ";".to_string()]),
            "a"
        );
        assert_eq!(apply_stop("text", &[]), "text");
    }

    #[test]
    fn config_validation() {
        let mut config = BackendConfig {
            endpoint: "http://localhost:1/v1/completions".into(),
            model: "m".into(),
            api_key_env: None,
            top_k: 5,
            max_inflight: 4,
            timeout_secs: 30.0,
            retry: RetryPolicy::default(),
        };
        assert!(config.validate().is_ok());
        config.max_inflight = 0;
        assert!(config.validate().is_err());
        config.max_inflight = 1;
        config.timeout_secs = 0.0;
        assert!(config.validate().is_err());
    }

    #[test]
    fn generation_params_validation() {
        assert!(GenerationParams::new(0).is_err());
        assert!(GenerationParams::new(1).is_ok());
    }

    #[test]
    fn backend_selection_round_trips_through_json() {
        let selection = BackendSelection::Http(BackendConfig {
            endpoint: "http://h/v1/completions".into(),
            model: "m".into(),
            api_key_env: Some("KEY".into()),
            top_k: 5,
            max_inflight: 2,
            timeout_secs: 10.0,
            retry: RetryPolicy::default(),
        });
        let json = serde_json::to_string(&selection).unwrap();
        assert!(json.contains("\"kind\":\"http\""));
        let back: BackendSelection = serde_json::from_str(&json).unwrap();
        assert_eq!(back, selection);
    }
}
