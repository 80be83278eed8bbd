//! Deterministic table-driven backend.
//!
//! Rule file (JSON):
//!
//! ```json
//! {
//!   "model_name": "mock",
//!   "default": {"label": "P", "confidence": 0.5},
//!   "zero_shot": {"d1": {"label": "H", "confidence": 0.8}},
//!   "one_shot": [{"demo": "d2", "target": "d1", "label": "H", "confidence": 0.9}],
//!   "raw": {"d3": "free text returned verbatim for zero-shot prompts on d3"},
//!   "target_logprobs": [{"demo": "d2", "target": "d1", "logprobs": [-0.5, -1.25]}]
//! }
//! ```
//!
//! With no demonstrations the zero-shot entry answers; with one, the one-shot
//! entry. With several, the mock averages the Patient probabilities of the
//! per-demonstration one-shot entries (missing pairs use `default`). The mock is
//! therefore insensitive to demonstration order.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::{Backend, ChatRequest, GatewayError, RawCompletion, ScoreRequest, TokenLogprob};
use crate::corpus::Label;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MockOutcome {
    pub label: Label,
    pub confidence: f64,
}

impl MockOutcome {
    pub fn new(label: Label, confidence: f64) -> Self {
        MockOutcome { label, confidence }
    }

    /// Outcome whose probability of `gold` equals `p_correct`.
    pub fn from_p_correct(gold: Label, p_correct: f64) -> Self {
        let p = p_correct.clamp(0.0, 1.0);
        if p >= 0.5 {
            MockOutcome::new(gold, p)
        } else {
            MockOutcome::new(gold.other(), 1.0 - p)
        }
    }

    fn p_patient(self) -> f64 {
        match self.label {
            Label::Patient => self.confidence,
            Label::Control => 1.0 - self.confidence,
        }
    }

    fn from_p_patient(p: f64) -> Self {
        if p >= 0.5 {
            MockOutcome::new(Label::Patient, p)
        } else {
            MockOutcome::new(Label::Control, 1.0 - p)
        }
    }

    /// The confidence is written so it parses back to the same value; whole
    /// numbers keep a decimal point, since a bare integer is not read as a probability.
    pub fn completion_text(self) -> String {
        let c = self.confidence;
        let conf = if c.fract() == 0.0 {
            format!("{c:.1}")
        } else {
            format!("{c}")
        };
        format!("{} with probability {conf}", self.label.answer())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockPairOutcome {
    pub demo: String,
    pub target: String,
    pub label: Label,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockPairLogprobs {
    pub demo: String,
    pub target: String,
    pub logprobs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default = "default_model")]
    pub model_name: String,
    pub default: MockOutcome,
    #[serde(default)]
    pub zero_shot: HashMap<String, MockOutcome>,
    #[serde(default)]
    pub one_shot: Vec<MockPairOutcome>,
    #[serde(default)]
    pub raw: HashMap<String, String>,
    #[serde(default)]
    pub target_logprobs: Vec<MockPairLogprobs>,
    #[serde(skip)]
    one_shot_index: HashMap<(String, String), MockOutcome>,
    #[serde(skip)]
    logprob_index: HashMap<(String, String), Vec<f64>>,
}

fn default_model() -> String {
    "mock".into()
}

impl MockRule {
    pub fn new(default: MockOutcome) -> Self {
        MockRule {
            model_name: default_model(),
            default,
            zero_shot: HashMap::new(),
            one_shot: Vec::new(),
            raw: HashMap::new(),
            target_logprobs: Vec::new(),
            one_shot_index: HashMap::new(),
            logprob_index: HashMap::new(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)?;
        let rule: MockRule = serde_json::from_str(&text)
            .map_err(|e| GatewayError::Config(format!("mock rules: {e}")))?;
        rule.validated()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GatewayError> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| GatewayError::Config(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn with_zero_shot(mut self, id: impl Into<String>, outcome: MockOutcome) -> Self {
        self.zero_shot.insert(id.into(), outcome);
        self
    }

    pub fn with_one_shot(
        mut self,
        demo: impl Into<String>,
        target: impl Into<String>,
        outcome: MockOutcome,
    ) -> Self {
        self.one_shot.push(MockPairOutcome {
            demo: demo.into(),
            target: target.into(),
            label: outcome.label,
            confidence: outcome.confidence,
        });
        self
    }

    pub fn with_target_logprobs(
        mut self,
        demo: impl Into<String>,
        target: impl Into<String>,
        logprobs: Vec<f64>,
    ) -> Self {
        self.target_logprobs.push(MockPairLogprobs {
            demo: demo.into(),
            target: target.into(),
            logprobs,
        });
        self
    }

    /// Checks confidences and builds lookup indices.
    pub fn validated(mut self) -> Result<Self, GatewayError> {
        let bad = |c: f64| !(0.0..=1.0).contains(&c);
        if bad(self.default.confidence)
            || self.zero_shot.values().any(|o| bad(o.confidence))
            || self.one_shot.iter().any(|o| bad(o.confidence))
        {
            return Err(GatewayError::Config(
                "mock confidences must lie in [0, 1]".into(),
            ));
        }
        self.one_shot_index = self
            .one_shot
            .iter()
            .map(|o| {
                (
                    (o.demo.clone(), o.target.clone()),
                    MockOutcome::new(o.label, o.confidence),
                )
            })
            .collect();
        self.logprob_index = self
            .target_logprobs
            .iter()
            .map(|o| ((o.demo.clone(), o.target.clone()), o.logprobs.clone()))
            .collect();
        Ok(self)
    }

    pub fn outcome(&self, demo_ids: &[String], target_id: &str) -> MockOutcome {
        let pair = |demo: &String| {
            self.one_shot_index
                .get(&(demo.clone(), target_id.to_string()))
                .copied()
                .unwrap_or(self.default)
        };
        match demo_ids {
            [] => self
                .zero_shot
                .get(target_id)
                .copied()
                .unwrap_or(self.default),
            [demo] => pair(demo),
            many => {
                let mean =
                    many.iter().map(|d| pair(d).p_patient()).sum::<f64>() / many.len() as f64;
                MockOutcome::from_p_patient(mean)
            }
        }
    }

    pub fn completion(&self, req: &ChatRequest) -> String {
        if req.demo_ids.is_empty() {
            if let Some(text) = self.raw.get(&req.target_id) {
                return text.clone();
            }
        }
        self.outcome(&req.demo_ids, &req.target_id)
            .completion_text()
    }
}

/// Mock backend with call counters.
#[derive(Debug)]
pub struct MockBackend {
    rule: MockRule,
    chat_calls: AtomicUsize,
    score_calls: AtomicUsize,
}

impl MockBackend {
    pub fn new(rule: MockRule) -> Self {
        MockBackend {
            rule,
            chat_calls: AtomicUsize::new(0),
            score_calls: AtomicUsize::new(0),
        }
    }

    pub fn rule(&self) -> &MockRule {
        &self.rule
    }

    pub fn chat_calls(&self) -> usize {
        self.chat_calls.load(Ordering::SeqCst)
    }

    pub fn score_calls(&self) -> usize {
        self.score_calls.load(Ordering::SeqCst)
    }
}

impl Backend for MockBackend {
    fn complete(
        &self,
        req: &ChatRequest,
        _want_logprobs: bool,
    ) -> Result<RawCompletion, GatewayError> {
        self.chat_calls.fetch_add(1, Ordering::SeqCst);
        Ok(RawCompletion::text(self.rule.completion(req)))
    }

    fn continuation_logprobs(&self, req: &ScoreRequest) -> Result<Vec<TokenLogprob>, GatewayError> {
        self.score_calls.fetch_add(1, Ordering::SeqCst);
        if self.rule.logprob_index.is_empty() {
            return Err(GatewayError::LogprobsUnsupported);
        }
        let demo = req.demo_ids.first().cloned().unwrap_or_default();
        let logprobs = self
            .rule
            .logprob_index
            .get(&(demo, req.target_id.clone()))
            .ok_or(GatewayError::LogprobsUnsupported)?;
        Ok(logprobs
            .iter()
            .enumerate()
            .map(|(i, &lp)| TokenLogprob {
                token: format!("t{i}"),
                logprob: lp,
            })
            .collect())
    }

    fn model_name(&self) -> &str {
        &self.rule.model_name
    }
}
