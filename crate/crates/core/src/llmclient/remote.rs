use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BackendError, BackendReply, ChatBackend, ChatMessage, ChatRequest};

/// Environment variable holding the API base URL, e.g. `https://api.openai.com/v1`.
pub const API_BASE_ENV: &str = "DISTRACTOR_API_BASE";
/// Environment variable holding the bearer credential.
pub const API_KEY_ENV: &str = "DISTRACTOR_API_KEY";

const DEFAULT_BASE: &str = "https://api.openai.com/v1";

/// Backend for any server implementing `POST {base}/chat/completions`.
pub struct OpenAiCompatible {
    url: String,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
    top_p: f64,
    n: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    #[serde(default)]
    index: usize,
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
    #[serde(default)]
    refusal: Option<String>,
}

impl OpenAiCompatible {
    pub fn new(base_url: &str, api_key: Option<String>, timeout: Duration) -> Result<Self, BackendError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Fatal(e.to_string()))?;
        Ok(Self {
            url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key,
            http,
        })
    }

    /// Reads the base URL and credential from the environment, falling back
    /// to the `OPENAI_*` names and then the public endpoint.
    pub fn from_env(timeout: Duration) -> Result<Self, BackendError> {
        let base = std::env::var(API_BASE_ENV)
            .or_else(|_| std::env::var("OPENAI_BASE_URL"))
            .unwrap_or_else(|_| DEFAULT_BASE.to_string());
        let key = std::env::var(API_KEY_ENV)
            .or_else(|_| std::env::var("OPENAI_API_KEY"))
            .ok();
        Self::new(&base, key, timeout)
    }
}

impl ChatBackend for OpenAiCompatible {
    fn send(&self, request: &ChatRequest) -> Result<BackendReply, BackendError> {
        let body = WireRequest {
            model: &request.model,
            messages: &request.messages,
            temperature: request.config.temperature,
            max_tokens: request.config.max_tokens,
            top_p: request.config.top_p,
            n: request.config.n_samples,
        };
        let mut builder = self.http.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder
            .send()
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendError::Transient(format!("http {status}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(BackendError::Fatal(format!("http {status}: {text}")));
        }
        let mut wire: WireResponse = resp
            .json()
            .map_err(|e| BackendError::Transient(format!("bad response body: {e}")))?;
        wire.choices.sort_by_key(|c| c.index);
        let mut texts = Vec::with_capacity(wire.choices.len());
        for choice in wire.choices {
            if let Some(refusal) = choice.message.refusal {
                return Ok(BackendReply {
                    texts: Vec::new(),
                    refusal: Some(refusal),
                });
            }
            if choice.finish_reason.as_deref() == Some("content_filter") {
                return Ok(BackendReply {
                    texts: Vec::new(),
                    refusal: Some("content_filter".into()),
                });
            }
            texts.push(choice.message.content.unwrap_or_default());
        }
        Ok(BackendReply::texts(texts))
    }
}
