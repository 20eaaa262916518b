//! Client for OpenAI-compatible chat-completion endpoints.
//!
//! Speaks the standard wire format (`model`, `messages`, `temperature`,
//! `max_tokens` in; `choices[0].message.content` and `usage` out), retries
//! transient failures with exponential backoff, accounts tokens per call,
//! and optionally appends a JSON Lines audit log of every exchange.

pub mod mock;

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::time::Instant;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid endpoint config: {0}")]
    InvalidConfig(String),
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint returned HTTP {status}: {body_excerpt}")]
    Protocol { status: u16, body_excerpt: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("audit log I/O: {0}")]
    Audit(#[from] std::io::Error),
}

/// Which side of a cascade an endpoint plays, or the judge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointRole {
    OpenSource,
    ClosedSource,
    Judge,
}

/// Connection settings for one chat-completion endpoint.
#[derive(Debug, Clone, Serialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    /// Resolved secret; never serialized.
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub max_retries: u32,
    /// Outbound requests per second; dispatch is serialized to honor it.
    pub rate_limit: Option<f64>,
    pub role: EndpointRole,
    /// First retry delay; doubles on each further retry. No jitter, so
    /// retry schedules are reproducible.
    pub backoff: Duration,
}

impl EndpointConfig {
    pub fn new(
        base_url: impl Into<String>,
        model_name: impl Into<String>,
        role: EndpointRole,
    ) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            api_key: None,
            timeout: Duration::from_secs(60),
            max_retries: 2,
            rate_limit: None,
            role,
            backoff: Duration::from_millis(200),
        }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        let url = reqwest::Url::parse(&self.base_url).map_err(|e| {
            ClientError::InvalidConfig(format!("base_url {:?}: {e}", self.base_url))
        })?;
        if !matches!(url.scheme(), "http" | "https") {
            return Err(ClientError::InvalidConfig(format!(
                "base_url must be http(s), got {:?}",
                self.base_url
            )));
        }
        if self.timeout.is_zero() {
            return Err(ClientError::InvalidConfig("timeout must be > 0".into()));
        }
        if let Some(rps) = self.rate_limit {
            if !rps.is_finite() || rps <= 0.0 {
                return Err(ClientError::InvalidConfig(format!(
                    "rate_limit must be a positive number of requests/second, got {rps}"
                )));
            }
        }
        Ok(())
    }

    fn chat_url(&self) -> String {
        let base = self.base_url.trim_end_matches('/');
        if base.ends_with("/v1") {
            format!("{base}/chat/completions")
        } else {
            format!("{base}/v1/chat/completions")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::Assistant,
            content: content.into(),
        }
    }
}

/// One chat-completion request. Requires at least one user message.
#[derive(Debug, Clone, Serialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(
        messages: Vec<ChatMessage>,
        temperature: f64,
        max_tokens: u32,
    ) -> Result<Self, ClientError> {
        if !messages.iter().any(|m| m.role == ChatRole::User) {
            return Err(ClientError::InvalidConfig(
                "chat request requires at least one user message".into(),
            ));
        }
        if temperature.is_nan() || temperature < 0.0 || max_tokens == 0 {
            return Err(ClientError::InvalidConfig(
                "temperature must be >= 0 and max_tokens > 0".into(),
            ));
        }
        Ok(Self {
            messages,
            temperature,
            max_tokens,
        })
    }

    /// Single user message at temperature 0, the judging default.
    pub fn deterministic(prompt: impl Into<String>, max_tokens: u32) -> Result<Self, ClientError> {
        Self::new(vec![ChatMessage::user(prompt)], 0.0, max_tokens)
    }
}

/// Token counts for one call. `estimated` marks counts reconstructed with
/// the byte heuristic instead of taken from the endpoint's usage object.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub estimated: bool,
}

impl Usage {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }

    pub fn add(&mut self, other: &Usage) {
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
        self.estimated |= other.estimated;
    }

    pub fn is_zero(&self) -> bool {
        self.prompt_tokens == 0 && self.completion_tokens == 0
    }
}

/// Coarse fallback token count: ceil(byte length / 4). Only used when the
/// endpoint omits its usage object; reports flag such counts as estimated.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.len() as u64).div_ceil(4)
}

/// Completion text plus accounted usage.
#[derive(Debug, Clone, Serialize)]
pub struct ChatCompletion {
    pub text: String,
    pub usage: Usage,
}

#[derive(Debug, Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    usage: Option<WireUsage>,
}

#[derive(Debug, Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Debug, Deserialize)]
struct WireMessage {
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
}

struct AuditLog {
    seq: u64,
    writer: Box<dyn Write + Send>,
}

/// Shareable chat client. One instance serves any number of endpoints;
/// a per-endpoint gate serializes dispatch when a rate limit is set.
pub struct ChatClient {
    http: reqwest::Client,
    limiter: Mutex<HashMap<String, Instant>>,
    audit: Option<Mutex<AuditLog>>,
}

impl Default for ChatClient {
    fn default() -> Self {
        Self::new()
    }
}

impl ChatClient {
    pub fn new() -> Self {
        Self {
            http: reqwest::Client::new(),
            limiter: Mutex::new(HashMap::new()),
            audit: None,
        }
    }

    /// Append every request/response exchange to a JSON Lines file.
    pub fn with_audit_log(mut self, path: impl AsRef<Path>) -> Result<Self, ClientError> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        self.audit = Some(Mutex::new(AuditLog {
            seq: 0,
            writer: Box::new(file),
        }));
        Ok(self)
    }

    /// Honor the endpoint's rate limit: wait until the next dispatch slot.
    async fn pace(&self, endpoint: &EndpointConfig) {
        let Some(rps) = endpoint.rate_limit else {
            return;
        };
        let interval = Duration::from_secs_f64(1.0 / rps);
        let wait_until = {
            let mut slots = self.limiter.lock().expect("limiter lock");
            let now = Instant::now();
            let slot = slots
                .entry(endpoint.chat_url())
                .and_modify(|next| {
                    if *next < now {
                        *next = now;
                    }
                })
                .or_insert(now);
            let this_slot = *slot;
            *slot += interval;
            this_slot
        };
        tokio::time::sleep_until(wait_until).await;
    }

    fn audit_record(
        &self,
        endpoint: &EndpointConfig,
        request: &ChatRequest,
        status: u16,
        body: &str,
    ) {
        let Some(audit) = &self.audit else { return };
        let mut log = audit.lock().expect("audit lock");
        log.seq += 1;
        let entry = serde_json::json!({
            "seq": log.seq,
            "url": endpoint.chat_url(),
            "model": endpoint.model_name,
            "role": endpoint.role,
            "request": request,
            "status": status,
            "response": body,
        });
        let _ = writeln!(log.writer, "{entry}");
    }

    /// POST a chat completion, retrying 429/5xx/transport failures with
    /// exponential backoff up to `max_retries` extra attempts.
    pub async fn chat_complete(
        &self,
        endpoint: &EndpointConfig,
        request: &ChatRequest,
    ) -> Result<ChatCompletion, ClientError> {
        endpoint.validate()?;
        let url = endpoint.chat_url();
        let body = WireRequest {
            model: &endpoint.model_name,
            messages: &request.messages,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
        };

        let mut delay = endpoint.backoff;
        let mut last_failure = String::new();
        for attempt in 0..=endpoint.max_retries {
            if attempt > 0 {
                tokio::time::sleep(delay).await;
                delay *= 2;
            }
            self.pace(endpoint).await;

            let mut req = self.http.post(&url).timeout(endpoint.timeout).json(&body);
            if let Some(key) = &endpoint.api_key {
                req = req.bearer_auth(key);
            }

            match req.send().await {
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().await.unwrap_or_default();
                    self.audit_record(endpoint, request, status.as_u16(), &text);
                    if status.is_success() {
                        return self.parse_completion(request, &text);
                    }
                    let retryable = status.as_u16() == 429 || status.is_server_error();
                    if !retryable {
                        return Err(ClientError::Protocol {
                            status: status.as_u16(),
                            body_excerpt: excerpt(&text),
                        });
                    }
                    last_failure = format!("HTTP {}", status.as_u16());
                }
                Err(e) => {
                    self.audit_record(endpoint, request, 0, &e.to_string());
                    last_failure = e.to_string();
                }
            }
            tracing::warn!(
                attempt = attempt + 1,
                max_attempts = endpoint.max_retries + 1,
                failure = %last_failure,
                "chat completion attempt failed"
            );
        }
        Err(ClientError::Transport {
            attempts: endpoint.max_retries + 1,
            message: last_failure,
        })
    }

    fn parse_completion(
        &self,
        request: &ChatRequest,
        body: &str,
    ) -> Result<ChatCompletion, ClientError> {
        let wire: WireResponse = serde_json::from_str(body)
            .map_err(|e| ClientError::MalformedResponse(format!("{e}; body: {}", excerpt(body))))?;
        let text = wire
            .choices
            .first()
            .and_then(|c| c.message.content.clone())
            .ok_or_else(|| ClientError::MalformedResponse("response has no choices".into()))?;
        let usage = match wire.usage {
            Some(u) => Usage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
                estimated: false,
            },
            None => Usage {
                prompt_tokens: request
                    .messages
                    .iter()
                    .map(|m| estimate_tokens(&m.content))
                    .sum(),
                completion_tokens: estimate_tokens(&text),
                estimated: true,
            },
        };
        Ok(ChatCompletion { text, usage })
    }
}

fn excerpt(body: &str) -> String {
    const LIMIT: usize = 200;
    if body.len() <= LIMIT {
        body.to_string()
    } else {
        let mut end = LIMIT;
        while !body.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}…", &body[..end])
    }
}
