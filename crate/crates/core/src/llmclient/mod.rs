//! Chat-completion access with a content-addressed response cache.
//!
//! Every request is keyed by the SHA-256 of its canonical serialization
//! (model, messages, decoding config). A cache hit never touches the
//! network. With no backend attached the client runs in replay mode and a
//! miss is reported as a fixture gap.

mod cache;
#[cfg(feature = "remote")]
mod remote;

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::{CacheError, ExportSelection, ImportSummary, ResponseCache};
#[cfg(feature = "remote")]
pub use remote::{OpenAiCompatible, API_BASE_ENV, API_KEY_ENV};

use crate::promptkit::RenderedPrompt;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("request rejected: {0}")]
    Rejected(String),
    #[error("replay miss: no recorded response for cache key {key}")]
    ReplayMiss { key: String },
    #[error("provider refused request {key}: {message}")]
    Refusal { key: String, message: String },
    #[error("expected {expected} samples, backend returned {got}")]
    SampleCount { expected: u32, got: usize },
    #[error("invalid decoding config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

/// Decoding parameters sent with each request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingConfig {
    pub temperature: f64,
    pub max_tokens: u32,
    pub top_p: f64,
    pub n_samples: u32,
}

impl DecodingConfig {
    /// Temperature 0, 350 tokens, top-p 1, one sample.
    pub const fn greedy() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 350,
            top_p: 1.0,
            n_samples: 1,
        }
    }

    pub const fn sampling(n_samples: u32, temperature: f64) -> Self {
        Self {
            temperature,
            max_tokens: 350,
            top_p: 1.0,
            n_samples,
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(LlmError::InvalidConfig(format!("temperature {}", self.temperature)));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidConfig("max_tokens must be positive".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(LlmError::InvalidConfig(format!("top_p {}", self.top_p)));
        }
        if self.n_samples == 0 {
            return Err(LlmError::InvalidConfig("n_samples must be positive".into()));
        }
        Ok(())
    }
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self::greedy()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub config: DecodingConfig,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, messages: Vec<ChatMessage>, config: DecodingConfig) -> Self {
        Self {
            model: model.into(),
            messages,
            config,
        }
    }

    /// System message (when present) followed by the user message.
    pub fn from_prompt(model: impl Into<String>, prompt: &RenderedPrompt, config: DecodingConfig) -> Self {
        let mut messages = Vec::with_capacity(2);
        if let Some(system) = &prompt.system {
            messages.push(ChatMessage::system(system.clone()));
        }
        messages.push(ChatMessage::user(prompt.user.clone()));
        Self::new(model, messages, config)
    }

    pub fn cache_key(&self) -> CacheKey {
        // field order is fixed by the struct definition
        let canonical = serde_json::to_vec(self).expect("request serializes");
        CacheKey(Sha256::digest(&canonical).into())
    }
}

/// SHA-256 of a request's canonical serialization.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey([u8; 32]);

impl CacheKey {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(Self(bytes.try_into().ok()?))
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CacheKey({})", self.to_hex())
    }
}

/// A request together with its recorded outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub cache_key: String,
    pub request: ChatRequest,
    pub response_texts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refusal: Option<String>,
}

impl ChatExchange {
    pub fn new(request: ChatRequest, response_texts: Vec<String>, refusal: Option<String>) -> Self {
        Self {
            cache_key: request.cache_key().to_hex(),
            request,
            response_texts,
            refusal,
        }
    }

    /// True when the stored key matches the digest of the stored request.
    pub fn digest_ok(&self) -> bool {
        self.request.cache_key().to_hex() == self.cache_key
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub texts: Vec<String>,
    pub refusal: Option<String>,
}

impl BackendReply {
    pub fn texts(texts: Vec<String>) -> Self {
        Self { texts, refusal: None }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    /// Worth retrying: timeouts, connection resets, 429 and 5xx.
    #[error("transient: {0}")]
    Transient(String),
    #[error("{0}")]
    Fatal(String),
}

/// Something that can answer a chat request over the wire.
pub trait ChatBackend: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<BackendReply, BackendError>;
}

/// Backend driven by a closure, for tests and for recording synthetic
/// fixtures.
pub struct FnBackend<F>(pub F);

impl<F> ChatBackend for FnBackend<F>
where
    F: Fn(&ChatRequest) -> Result<BackendReply, BackendError> + Send + Sync,
{
    fn send(&self, request: &ChatRequest) -> Result<BackendReply, BackendError> {
        (self.0)(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u32 << attempt.saturating_sub(1).min(16);
        (self.base_delay * factor).min(self.max_delay)
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(8),
        }
    }
}

/// Counting semaphore bounding in-flight backend calls.
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("limiter lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("limiter lock");
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("limiter lock") += 1;
        self.0.cv.notify_one();
    }
}

pub const DEFAULT_CONCURRENCY: usize = 4;

pub struct LlmClient {
    cache: ResponseCache,
    backend: Option<Arc<dyn ChatBackend>>,
    limiter: Limiter,
    retry: RetryPolicy,
    network_calls: AtomicUsize,
}

impl LlmClient {
    /// Cache-only client; any miss is a [`LlmError::ReplayMiss`].
    pub fn replay(cache: ResponseCache) -> Self {
        Self {
            cache,
            backend: None,
            limiter: Limiter::new(DEFAULT_CONCURRENCY),
            retry: RetryPolicy::default(),
            network_calls: AtomicUsize::new(0),
        }
    }

    pub fn with_backend(cache: ResponseCache, backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            backend: Some(backend),
            ..Self::replay(cache)
        }
    }

    pub fn concurrency(mut self, in_flight: usize) -> Self {
        self.limiter = Limiter::new(in_flight);
        self
    }

    pub fn retry_policy(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    /// Number of requests that reached the backend (retries included).
    pub fn network_calls(&self) -> usize {
        self.network_calls.load(Ordering::Relaxed)
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<Vec<String>, LlmError> {
        request.config.validate()?;
        let key = request.cache_key();
        if let Some(hit) = self.cache.get(&key)? {
            return into_texts(hit);
        }
        let Some(backend) = &self.backend else {
            return Err(LlmError::ReplayMiss { key: key.to_hex() });
        };
        let reply = {
            let _permit = self.limiter.acquire();
            self.send_with_retry(backend.as_ref(), request)?
        };
        let expected = request.config.n_samples;
        if reply.refusal.is_none() && reply.texts.len() != expected as usize {
            // partial sample sets are never cached
            return Err(LlmError::SampleCount {
                expected,
                got: reply.texts.len(),
            });
        }
        let texts = if reply.refusal.is_some() { Vec::new() } else { reply.texts };
        let stored = self
            .cache
            .put(ChatExchange::new(request.clone(), texts, reply.refusal))?;
        into_texts(stored)
    }

    fn send_with_retry(&self, backend: &dyn ChatBackend, request: &ChatRequest) -> Result<BackendReply, LlmError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.network_calls.fetch_add(1, Ordering::Relaxed);
            match backend.send(request) {
                Ok(reply) => return Ok(reply),
                Err(BackendError::Fatal(message)) => return Err(LlmError::Rejected(message)),
                Err(BackendError::Transient(message)) => {
                    if attempt >= self.retry.max_attempts {
                        return Err(LlmError::Transport {
                            attempts: attempt,
                            message,
                        });
                    }
                    tracing::warn!(stage = "llm", attempt, %message, "transient failure, backing off");
                    thread::sleep(self.retry.delay(attempt));
                }
            }
        }
    }
}

fn into_texts(exchange: ChatExchange) -> Result<Vec<String>, LlmError> {
    match exchange.refusal {
        Some(message) => Err(LlmError::Refusal {
            key: exchange.cache_key,
            message,
        }),
        None => Ok(exchange.response_texts),
    }
}
