//! Chat-completion access and prediction parsing.
//!
//! A [`Gateway`] wraps a [`Backend`] (remote HTTP or the deterministic mock)
//! with response parsing, unparsable-completion retries and a bound on the
//! number of requests in flight.

pub(crate) mod http;
mod mock;
mod parse;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;

pub use http::HttpBackend;
pub use mock::{MockBackend, MockOutcome, MockPairLogprobs, MockPairOutcome, MockRule};
pub use parse::{parse_prediction, ParsedPrediction};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    TransportError { attempts: usize, message: String },
    #[error("backend refused request with HTTP {status}: {body}")]
    BackendRefused { status: u16, body: String },
    #[error("completion has no label marker: {0:?}")]
    UnparsableCompletion(String),
    #[error("backend does not return token log-probabilities")]
    LogprobsUnsupported,
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("invalid backend configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    #[default]
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub base_url: Option<String>,
    pub model_name: String,
    pub temperature: f64,
    pub top_k_sampling: u32,
    /// Whether to send `top_k`; some OpenAI-compatible servers reject it.
    pub send_top_k: bool,
    pub max_tokens: Option<u32>,
    pub max_retries: usize,
    pub retry_backoff_ms: u64,
    pub timeout_secs: u64,
    pub api_key_env: String,
    pub max_inflight: usize,
    /// Mock rule file (mock kind only).
    pub mock_rules: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            base_url: None,
            model_name: "mock".into(),
            temperature: 0.01,
            top_k_sampling: 50,
            send_top_k: true,
            max_tokens: None,
            max_retries: 2,
            retry_backoff_ms: 500,
            timeout_secs: 120,
            api_key_env: "LLM_API_KEY".into(),
            max_inflight: 8,
            mock_rules: None,
        }
    }
}

impl BackendConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }

    /// Builds the configured backend and wraps it in a gateway.
    pub fn connect(&self) -> Result<Gateway, GatewayError> {
        let backend: Arc<dyn Backend> = match self.kind {
            BackendKind::Http => Arc::new(HttpBackend::new(self)?),
            BackendKind::Mock => {
                let path = self.mock_rules.as_ref().ok_or_else(|| {
                    GatewayError::Config("mock backend needs `mock_rules`".into())
                })?;
                Arc::new(MockBackend::new(MockRule::load(path)?))
            }
        };
        Gateway::new(backend, self.max_retries, self.max_inflight)
    }
}

/// One chat request. `demo_ids`, `target_id` and `run` travel alongside the
/// messages as sentinels: remote backends ignore them, the mock keys on them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub demo_ids: Vec<String>,
    pub target_id: String,
    pub run: usize,
}

/// Request for the log-probabilities of `continuation` given `prefix`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub prefix: String,
    pub continuation: String,
    pub demo_ids: Vec<String>,
    pub target_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCompletion {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
}

impl RawCompletion {
    pub fn text(text: impl Into<String>) -> Self {
        RawCompletion {
            text: text.into(),
            token_logprobs: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseStatus {
    Clean,
    /// Label found without a probability; confidence set to 0.5.
    Fallback,
    /// Probability found outside [0, 1] and clamped.
    Clamped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPrediction {
    pub label: Label,
    pub confidence: f64,
    pub raw: RawCompletion,
    pub parse_status: ParseStatus,
}

impl LabeledPrediction {
    /// Probability assigned to `Patient` under the two-class complement.
    pub fn p_patient(&self) -> f64 {
        match self.label {
            Label::Patient => self.confidence,
            Label::Control => 1.0 - self.confidence,
        }
    }
}

/// Probability of the gold label: the stated confidence when the prediction
/// matches, its complement otherwise.
pub fn correct_label_probability(pred: &LabeledPrediction, gold: Label) -> f64 {
    if pred.label == gold {
        pred.confidence
    } else {
        1.0 - pred.confidence
    }
}

pub trait Backend: Send + Sync {
    fn complete(
        &self,
        req: &ChatRequest,
        want_logprobs: bool,
    ) -> Result<RawCompletion, GatewayError>;

    /// Log-probabilities of each continuation token conditioned on the prefix.
    fn continuation_logprobs(&self, req: &ScoreRequest) -> Result<Vec<TokenLogprob>, GatewayError>;

    fn model_name(&self) -> &str;
}

pub struct Gateway {
    backend: Arc<dyn Backend>,
    max_retries: usize,
    pool: rayon::ThreadPool,
    max_inflight: usize,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("model", &self.backend.model_name())
            .field("max_retries", &self.max_retries)
            .field("max_inflight", &self.max_inflight)
            .finish()
    }
}

impl Gateway {
    pub fn new(
        backend: Arc<dyn Backend>,
        max_retries: usize,
        max_inflight: usize,
    ) -> Result<Self, GatewayError> {
        let max_inflight = max_inflight.max(1);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(max_inflight)
            .thread_name(|i| format!("gateway-{i}"))
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(Gateway {
            backend,
            max_retries,
            pool,
            max_inflight,
        })
    }

    pub fn model_name(&self) -> &str {
        self.backend.model_name()
    }

    pub fn max_inflight(&self) -> usize {
        self.max_inflight
    }

    pub fn complete(
        &self,
        req: &ChatRequest,
        want_logprobs: bool,
    ) -> Result<RawCompletion, GatewayError> {
        self.backend.complete(req, want_logprobs)
    }

    /// Completes and parses; unparsable completions are re-queried up to
    /// `max_retries` times before the error surfaces.
    pub fn classify(&self, req: &ChatRequest) -> Result<LabeledPrediction, GatewayError> {
        if req.user.trim().is_empty() {
            return Err(GatewayError::Config("empty prompt".into()));
        }
        let mut attempt = 0;
        loop {
            let raw = self.backend.complete(req, false)?;
            match parse_prediction(&raw.text) {
                Ok(parsed) => {
                    if parsed.status != ParseStatus::Clean {
                        log::warn!(
                            "target {}: {:?} parse of completion {:?}",
                            req.target_id,
                            parsed.status,
                            raw.text
                        );
                    }
                    return Ok(LabeledPrediction {
                        label: parsed.label,
                        confidence: parsed.confidence,
                        raw,
                        parse_status: parsed.status,
                    });
                }
                Err(e) if attempt >= self.max_retries => return Err(e),
                Err(_) => {
                    log::debug!("target {}: unparsable completion, retrying", req.target_id);
                    attempt += 1;
                }
            }
        }
    }

    /// Classifies every request with at most `max_inflight` in flight. Results
    /// come back in input order regardless of completion order.
    pub fn classify_all(
        &self,
        reqs: &[ChatRequest],
    ) -> Vec<Result<LabeledPrediction, GatewayError>> {
        self.pool
            .install(|| reqs.par_iter().map(|r| self.classify(r)).collect())
    }

    pub fn continuation_logprobs(
        &self,
        req: &ScoreRequest,
    ) -> Result<Vec<TokenLogprob>, GatewayError> {
        self.backend.continuation_logprobs(req)
    }

    pub fn continuation_logprobs_all(
        &self,
        reqs: &[ScoreRequest],
    ) -> Vec<Result<Vec<TokenLogprob>, GatewayError>> {
        self.pool.install(|| {
            reqs.par_iter()
                .map(|r| self.backend.continuation_logprobs(r))
                .collect()
        })
    }
}
