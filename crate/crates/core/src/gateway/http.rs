//! OpenAI-compatible HTTP backend.
//!
//! Chat: `POST {base}/v1/chat/completions`. Continuation scoring (for the
//! conditional-entropy baseline) uses the legacy completions endpoint with
//! `echo` so the server returns log-probabilities of the prompt tokens.

use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use super::{
    Backend, BackendConfig, ChatRequest, GatewayError, RawCompletion, ScoreRequest, TokenLogprob,
};

/// Blocking JSON POST with retries on transport failures, 429 and 5xx.
#[derive(Debug, Clone)]
pub(crate) struct JsonClient {
    agent: ureq::Agent,
    api_key: Option<String>,
    max_retries: usize,
    backoff: Duration,
}

impl JsonClient {
    pub(crate) fn new(
        timeout: Duration,
        api_key_env: &str,
        max_retries: usize,
        backoff: Duration,
    ) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        JsonClient {
            agent: config.into(),
            api_key: std::env::var(api_key_env).ok().filter(|k| !k.is_empty()),
            max_retries,
            backoff,
        }
    }

    pub(crate) fn post(&self, url: &str, body: &Value) -> Result<Value, GatewayError> {
        let mut last = String::new();
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                let wait = self.backoff.saturating_mul(1 << (attempt - 1).min(16));
                log::debug!("retrying {url} in {wait:?} (attempt {attempt})");
                thread::sleep(wait);
            }
            let mut request = self.agent.post(url);
            if let Some(key) = &self.api_key {
                request = request.header("Authorization", &format!("Bearer {key}"));
            }
            let mut response = match request.send_json(body) {
                Ok(r) => r,
                Err(e) => {
                    last = e.to_string();
                    continue;
                }
            };
            let status = response.status().as_u16();
            let text = response
                .body_mut()
                .read_to_string()
                .map_err(|e| GatewayError::MalformedResponse(e.to_string()));
            match status {
                200..=299 => {
                    let text = text?;
                    return serde_json::from_str(&text)
                        .map_err(|e| GatewayError::MalformedResponse(format!("{e}: {text:.200}")));
                }
                429 | 500..=599 => {
                    last = format!("HTTP {status}: {}", text.unwrap_or_default());
                }
                _ => {
                    return Err(GatewayError::BackendRefused {
                        status,
                        body: text.unwrap_or_default(),
                    })
                }
            }
        }
        Err(GatewayError::TransportError {
            attempts: self.max_retries + 1,
            message: last,
        })
    }
}

pub(crate) fn endpoint(base_url: &str, path: &str) -> String {
    format!("{}/{}", base_url.trim_end_matches('/'), path)
}

#[derive(Debug)]
pub struct HttpBackend {
    client: JsonClient,
    base_url: String,
    model_name: String,
    temperature: f64,
    top_k: Option<u32>,
    max_tokens: Option<u32>,
}

impl HttpBackend {
    pub fn new(config: &BackendConfig) -> Result<Self, GatewayError> {
        let base_url = config
            .base_url
            .clone()
            .ok_or_else(|| GatewayError::Config("http backend needs `base_url`".into()))?;
        Ok(HttpBackend {
            client: JsonClient::new(
                config.timeout(),
                &config.api_key_env,
                config.max_retries,
                Duration::from_millis(config.retry_backoff_ms),
            ),
            base_url,
            model_name: config.model_name.clone(),
            temperature: config.temperature,
            top_k: config.send_top_k.then_some(config.top_k_sampling),
            max_tokens: config.max_tokens,
        })
    }

    fn chat_body(&self, req: &ChatRequest, want_logprobs: bool) -> Value {
        let mut messages = Vec::new();
        if !req.system.is_empty() {
            messages.push(json!({"role": "system", "content": req.system}));
        }
        messages.push(json!({"role": "user", "content": req.user}));
        let mut body = json!({
            "model": self.model_name,
            "messages": messages,
            "temperature": self.temperature,
        });
        if let Some(k) = self.top_k {
            body["top_k"] = json!(k);
        }
        if let Some(n) = self.max_tokens {
            body["max_tokens"] = json!(n);
        }
        if want_logprobs {
            body["logprobs"] = json!(true);
        }
        body
    }
}

fn parse_chat(v: &Value) -> Result<RawCompletion, GatewayError> {
    let choice = &v["choices"][0];
    let text = choice["message"]["content"]
        .as_str()
        .ok_or_else(|| {
            GatewayError::MalformedResponse("missing choices[0].message.content".into())
        })?
        .to_string();
    let token_logprobs = choice["logprobs"]["content"].as_array().map(|items| {
        items
            .iter()
            .filter_map(|item| {
                Some(TokenLogprob {
                    token: item["token"].as_str().unwrap_or_default().to_string(),
                    logprob: item["logprob"].as_f64()?,
                })
            })
            .collect()
    });
    Ok(RawCompletion {
        text,
        token_logprobs,
    })
}

/// Picks the echoed tokens whose character offset falls inside the continuation.
fn parse_echo(v: &Value, prefix_chars: usize) -> Result<Vec<TokenLogprob>, GatewayError> {
    let lp = &v["choices"][0]["logprobs"];
    let (Some(tokens), Some(logprobs), Some(offsets)) = (
        lp["tokens"].as_array(),
        lp["token_logprobs"].as_array(),
        lp["text_offset"].as_array(),
    ) else {
        return Err(GatewayError::LogprobsUnsupported);
    };
    let out: Vec<TokenLogprob> = tokens
        .iter()
        .zip(logprobs)
        .zip(offsets)
        .filter(|(_, off)| off.as_u64().is_some_and(|o| o as usize >= prefix_chars))
        .filter_map(|((tok, lp), _)| {
            Some(TokenLogprob {
                token: tok.as_str().unwrap_or_default().to_string(),
                logprob: lp.as_f64()?,
            })
        })
        .collect();
    if out.is_empty() {
        return Err(GatewayError::LogprobsUnsupported);
    }
    Ok(out)
}

impl Backend for HttpBackend {
    fn complete(
        &self,
        req: &ChatRequest,
        want_logprobs: bool,
    ) -> Result<RawCompletion, GatewayError> {
        let url = endpoint(&self.base_url, "v1/chat/completions");
        let v = self
            .client
            .post(&url, &self.chat_body(req, want_logprobs))?;
        parse_chat(&v)
    }

    fn continuation_logprobs(&self, req: &ScoreRequest) -> Result<Vec<TokenLogprob>, GatewayError> {
        let url = endpoint(&self.base_url, "v1/completions");
        let body = json!({
            "model": self.model_name,
            "prompt": format!("{}{}", req.prefix, req.continuation),
            "max_tokens": 1,
            "echo": true,
            "logprobs": 1,
            "temperature": self.temperature,
        });
        match self.client.post(&url, &body) {
            Ok(v) => parse_echo(&v, req.prefix.chars().count()),
            Err(GatewayError::BackendRefused { status: 404, .. }) => {
                Err(GatewayError::LogprobsUnsupported)
            }
            Err(e) => Err(e),
        }
    }

    fn model_name(&self) -> &str {
        &self.model_name
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chat_body_layout() {
        let backend = HttpBackend::new(&BackendConfig {
            kind: super::super::BackendKind::Http,
            base_url: Some("http://localhost:1/".into()),
            model_name: "m".into(),
            ..Default::default()
        })
        .unwrap();
        let req = ChatRequest {
            system: "sys".into(),
            user: "usr".into(),
            demo_ids: vec![],
            target_id: "t".into(),
            run: 0,
        };
        let body = backend.chat_body(&req, true);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "usr");
        assert_eq!(body["temperature"], 0.01);
        assert_eq!(body["top_k"], 50);
        assert_eq!(body["logprobs"], true);
        let no_sys = ChatRequest {
            system: String::new(),
            ..req
        };
        assert_eq!(
            backend.chat_body(&no_sys, false)["messages"]
                .as_array()
                .unwrap()
                .len(),
            1
        );
        assert_eq!(endpoint("http://h/", "v1/x"), "http://h/v1/x");
    }

    #[test]
    fn parses_chat_and_echo_responses() {
        let v = json!({"choices": [{"message": {"content": "(P) 0.8"},
            "logprobs": {"content": [{"token": "(", "logprob": -0.1}]}}]});
        let c = parse_chat(&v).unwrap();
        assert_eq!(c.text, "(P) 0.8");
        assert_eq!(c.token_logprobs.unwrap()[0].logprob, -0.1);

        let v = json!({"choices": [{"logprobs": {
            "tokens": ["ab", "cd", "ef"],
            "token_logprobs": [null, -1.0, -2.0],
            "text_offset": [0, 2, 4]}}]});
        let lps = parse_echo(&v, 2).unwrap();
        assert_eq!(lps.len(), 2);
        assert_eq!(lps[1].logprob, -2.0);
        assert!(matches!(
            parse_echo(&json!({}), 0),
            Err(GatewayError::LogprobsUnsupported)
        ));
    }
}
