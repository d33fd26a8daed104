//! Chat-completion client: retries, caching and bounded concurrency over a
//! pluggable backend.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::cache::{CacheRecord, ResponseCache};
use super::prompt::PromptBundle;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub prompt: String,
    pub n: usize,
    pub temperature: f64,
    pub max_tokens: usize,
    pub model: String,
}

impl LlmRequest {
    /// Hex SHA-256 over prompt, completion count, temperature and model.
    pub fn cache_key(&self) -> String {
        let mut h = Sha256::new();
        for part in [self.prompt.as_bytes(), &(self.n as u64).to_le_bytes(), &self.temperature.to_le_bytes()] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part);
        }
        h.update(self.model.as_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    /// Backend calls made for this response, including failed ones.
    pub attempts: u32,
    pub prompt_chars: usize,
    pub completion_chars: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub completions: Vec<String>,
    pub usage: Usage,
    pub cache_hit: bool,
}

/// Failure reported by a backend for one call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendError {
    /// Worth retrying: rate limits, server errors, dropped connections.
    Transient(String),
    /// Credentials rejected.
    Auth(String),
    /// Will not succeed on retry.
    Fatal(String),
}

pub trait LlmBackend: Send + Sync {
    fn model_name(&self) -> &str;
    fn call(&self, request: &LlmRequest) -> std::result::Result<Vec<String>, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 5, base_delay_ms: 500, max_delay_ms: 8_000 }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (1-based), doubling each time.
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt.saturating_sub(1)).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

pub struct LlmClient {
    backend: Arc<dyn LlmBackend>,
    cache: ResponseCache,
    retry: RetryPolicy,
    max_in_flight: usize,
    max_tokens: usize,
}

impl LlmClient {
    pub fn new(backend: Arc<dyn LlmBackend>) -> Self {
        Self {
            backend,
            cache: ResponseCache::in_memory(),
            retry: RetryPolicy::default(),
            max_in_flight: 4,
            max_tokens: 512,
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = cache;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    pub fn with_max_tokens(mut self, n: usize) -> Self {
        self.max_tokens = n;
        self
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    pub fn request(&self, prompt: String, n: usize, temperature: f64) -> LlmRequest {
        LlmRequest { prompt, n, temperature, max_tokens: self.max_tokens, model: self.backend.model_name().to_string() }
    }

    /// Cached response for `request`, or a fresh one from the backend.
    pub fn complete(&self, request: &LlmRequest) -> Result<LlmResponse> {
        if request.n == 0 {
            return Err(Error::Config("n_completions must be at least 1".into()));
        }
        let key = request.cache_key();
        let lock = self.cache.key_lock(&key);
        let _guard = lock.lock().unwrap();
        if let Some(hit) = self.cache.get(&key) {
            return Ok(LlmResponse { completions: hit.completions, usage: hit.usage, cache_hit: true });
        }
        let mut attempts = 0;
        let completions = loop {
            attempts += 1;
            let err = match self.backend.call(request) {
                Ok(c) if c.len() == request.n => break c,
                Ok(c) => BackendError::Transient(format!("expected {} completions, got {}", request.n, c.len())),
                Err(e) => e,
            };
            match err {
                BackendError::Auth(msg) => return Err(Error::Auth(msg)),
                BackendError::Fatal(msg) => return Err(Error::EndpointUnavailable { attempts, msg }),
                BackendError::Transient(msg) if attempts >= self.retry.max_attempts => {
                    return Err(Error::EndpointUnavailable { attempts, msg });
                }
                BackendError::Transient(msg) => {
                    let wait = self.retry.delay(attempts);
                    log::warn!("attempt {attempts} failed ({msg}); retrying in {wait:?}");
                    std::thread::sleep(wait);
                }
            }
        };
        let usage = Usage {
            attempts,
            prompt_chars: request.prompt.chars().count(),
            completion_chars: completions.iter().map(|c| c.chars().count()).sum(),
        };
        self.cache.insert(CacheRecord {
            key,
            request: request.clone(),
            completions: completions.clone(),
            usage: usage.clone(),
        })?;
        Ok(LlmResponse { completions, usage, cache_hit: false })
    }

    /// Runs `requests` with at most `max_in_flight` concurrent calls.
    /// Results come back in request order.
    pub fn complete_many(&self, requests: &[LlmRequest]) -> Vec<Result<LlmResponse>> {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<LlmResponse>>>> = requests.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..self.max_in_flight.min(requests.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(req) = requests.get(i) else { break };
                    *slots[i].lock().unwrap() = Some(self.complete(req));
                });
            }
        });
        slots.into_iter().map(|m| m.into_inner().unwrap().expect("every slot filled")).collect()
    }
}

/// Renders `bundle` and asks for `n` completions.
pub fn complete(client: &LlmClient, bundle: &PromptBundle, n: usize, temperature: f64) -> Result<LlmResponse> {
    client.complete(&client.request(bundle.render(), n, temperature))
}
