//! OpenAI-compatible chat-completion backend over blocking HTTP.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::client::{BackendError, LlmBackend, LlmRequest};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    /// Full chat-completions URL.
    pub url: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            url: "http://localhost:8000/v1/chat/completions".into(),
            model: "gpt-3.5-turbo".into(),
            api_key_env: "ANTKIT_API_KEY".into(),
            timeout_secs: 120,
        }
    }
}

impl HttpConfig {
    /// Defaults overridden by `ANTKIT_LLM_URL`, `ANTKIT_LLM_MODEL` and
    /// `ANTKIT_LLM_KEY_ENV`.
    pub fn from_env() -> Self {
        let mut c = Self::default();
        if let Ok(v) = std::env::var("ANTKIT_LLM_URL") {
            c.url = v;
        }
        if let Ok(v) = std::env::var("ANTKIT_LLM_MODEL") {
            c.model = v;
        }
        if let Ok(v) = std::env::var("ANTKIT_LLM_KEY_ENV") {
            c.api_key_env = v;
        }
        c
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        Self { config, agent, api_key }
    }
}

/// Completion texts from a chat-completions response body.
pub fn parse_chat_response(body: &Value) -> Result<Vec<String>, BackendError> {
    let choices = body
        .get("choices")
        .and_then(Value::as_array)
        .ok_or_else(|| BackendError::Fatal("response has no choices".into()))?;
    choices
        .iter()
        .map(|c| {
            c.pointer("/message/content")
                .or_else(|| c.get("text"))
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| BackendError::Fatal("choice has no content".into()))
        })
        .collect()
}

/// Maps an HTTP status onto a retry class.
pub fn classify_status(status: u16, body: &str) -> BackendError {
    let msg = format!("status {status}: {}", body.chars().take(200).collect::<String>());
    match status {
        401 | 403 => BackendError::Auth(msg),
        408 | 429 | 500..=599 => BackendError::Transient(msg),
        _ => BackendError::Fatal(msg),
    }
}

impl LlmBackend for HttpBackend {
    fn model_name(&self) -> &str {
        &self.config.model
    }

    fn call(&self, request: &LlmRequest) -> Result<Vec<String>, BackendError> {
        let body = json!({
            "model": request.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "n": request.n,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let mut req = self.agent.post(&self.config.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        if status != 200 {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(classify_status(status, &text));
        }
        let value: Value = resp.body_mut().read_json().map_err(|e| BackendError::Transient(e.to_string()))?;
        parse_chat_response(&value)
    }
}
