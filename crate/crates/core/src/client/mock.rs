//! In-process mock of the chat-completion wire protocol.
//!
//! Serves canned completions either as an ordered replay (sequence mode)
//! or keyed by a hash of the request messages (map mode), and records
//! every request for assertions. An exhausted or unmatched script answers
//! 500 with a marker body so tests fail loudly instead of hanging.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::routing::post;
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use sha2::{Digest, Sha256};
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use super::{ChatRequest, ClientError, EndpointConfig, EndpointRole};

pub const EXHAUSTED_MARKER: &str = "mock script exhausted";
pub const UNMATCHED_MARKER: &str = "mock script has no entry for request";

/// One canned answer: either a completion (optionally with a usage
/// object) or an HTTP failure.
#[derive(Debug, Clone)]
pub enum CannedResponse {
    Completion {
        content: String,
        usage: Option<(u64, u64)>,
    },
    Failure {
        status: u16,
        body: String,
    },
}

impl CannedResponse {
    pub fn text(content: impl Into<String>) -> Self {
        CannedResponse::Completion {
            content: content.into(),
            usage: None,
        }
    }

    pub fn with_usage(
        content: impl Into<String>,
        prompt_tokens: u64,
        completion_tokens: u64,
    ) -> Self {
        CannedResponse::Completion {
            content: content.into(),
            usage: Some((prompt_tokens, completion_tokens)),
        }
    }

    pub fn failure(status: u16, body: impl Into<String>) -> Self {
        CannedResponse::Failure {
            status,
            body: body.into(),
        }
    }
}

/// Replay order: strict sequence, or lookup by request key.
#[derive(Debug, Clone)]
pub enum MockScript {
    Sequence(Vec<CannedResponse>),
    Map(HashMap<String, CannedResponse>),
}

#[derive(Debug, Clone, Deserialize)]
pub struct RecordedMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct RecordedRequest {
    #[serde(default)]
    pub model: String,
    pub messages: Vec<RecordedMessage>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub max_tokens: u32,
}

impl RecordedRequest {
    /// The map-mode lookup key for this request.
    pub fn key(&self) -> String {
        hash_messages(
            self.messages
                .iter()
                .map(|m| (m.role.as_str(), m.content.as_str())),
        )
    }

    /// Concatenated user-visible content, for quick assertions.
    pub fn flat_content(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

fn hash_messages<'a>(messages: impl Iterator<Item = (&'a str, &'a str)>) -> String {
    let mut hasher = Sha256::new();
    for (role, content) in messages {
        hasher.update(role.as_bytes());
        hasher.update([0x1e]);
        hasher.update(content.as_bytes());
        hasher.update([0x1f]);
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Key a [`ChatRequest`] the same way the server keys incoming requests.
pub fn request_key(request: &ChatRequest) -> String {
    hash_messages(request.messages.iter().map(|m| {
        let role = match m.role {
            super::ChatRole::System => "system",
            super::ChatRole::User => "user",
            super::ChatRole::Assistant => "assistant",
        };
        (role, m.content.as_str())
    }))
}

struct MockState {
    script: MockScript,
    cursor: Mutex<usize>,
    recorded: Mutex<Vec<RecordedRequest>>,
}

/// Handle to a running mock endpoint. Dropping it without `shutdown` aborts
/// the serving task.
pub struct MockServer {
    addr: SocketAddr,
    state: Arc<MockState>,
    stop: Option<oneshot::Sender<()>>,
    handle: JoinHandle<()>,
}

impl MockServer {
    /// Bind an ephemeral local port.
    pub async fn start(script: MockScript) -> Result<Self, ClientError> {
        Self::start_on("127.0.0.1:0", script).await
    }

    pub async fn start_on(listen: &str, script: MockScript) -> Result<Self, ClientError> {
        let empty = match &script {
            MockScript::Sequence(s) => s.is_empty(),
            MockScript::Map(m) => m.is_empty(),
        };
        if empty {
            return Err(ClientError::InvalidConfig(
                "mock script must be non-empty".into(),
            ));
        }

        let state = Arc::new(MockState {
            script,
            cursor: Mutex::new(0),
            recorded: Mutex::new(Vec::new()),
        });
        let app = Router::new()
            .route("/v1/chat/completions", post(serve_completion))
            .with_state(Arc::clone(&state));

        let listener = tokio::net::TcpListener::bind(listen)
            .await
            .map_err(|e| ClientError::InvalidConfig(format!("mock bind {listen}: {e}")))?;
        let addr = listener.local_addr().map_err(ClientError::Audit)?;

        let (stop, stopped) = oneshot::channel::<()>();
        let handle = tokio::spawn(async move {
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = stopped.await;
                })
                .await;
        });

        Ok(Self {
            addr,
            state,
            stop: Some(stop),
            handle,
        })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Endpoint config pointing at this server.
    pub fn endpoint(&self, model_name: &str, role: EndpointRole) -> EndpointConfig {
        let mut cfg = EndpointConfig::new(self.base_url(), model_name, role);
        cfg.backoff = std::time::Duration::from_millis(1);
        cfg
    }

    pub fn recorded(&self) -> Vec<RecordedRequest> {
        self.state.recorded.lock().expect("recorded lock").clone()
    }

    pub fn requests_served(&self) -> usize {
        self.state.recorded.lock().expect("recorded lock").len()
    }

    pub async fn shutdown(mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        let _ = (&mut self.handle).await;
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.handle.abort();
    }
}

async fn serve_completion(
    State(state): State<Arc<MockState>>,
    Json(body): Json<serde_json::Value>,
) -> impl IntoResponse {
    let request: RecordedRequest = match serde_json::from_value(body) {
        Ok(r) => r,
        Err(e) => {
            return (
                StatusCode::BAD_REQUEST,
                Json(json!({"error": format!("malformed chat request: {e}")})),
            );
        }
    };
    let key = request.key();
    state.recorded.lock().expect("recorded lock").push(request);

    let canned = match &state.script {
        MockScript::Sequence(items) => {
            let mut cursor = state.cursor.lock().expect("cursor lock");
            let item = items.get(*cursor).cloned();
            *cursor += 1;
            match item {
                Some(c) => c,
                None => {
                    return (
                        StatusCode::INTERNAL_SERVER_ERROR,
                        Json(json!({"error": EXHAUSTED_MARKER})),
                    );
                }
            }
        }
        MockScript::Map(map) => match map.get(&key).cloned() {
            Some(c) => c,
            None => {
                return (
                    StatusCode::INTERNAL_SERVER_ERROR,
                    Json(json!({"error": UNMATCHED_MARKER, "key": key})),
                );
            }
        },
    };

    match canned {
        CannedResponse::Completion { content, usage } => {
            let mut payload = json!({
                "id": "mock-completion",
                "object": "chat.completion",
                "model": "mock",
                "choices": [{
                    "index": 0,
                    "message": {"role": "assistant", "content": content},
                    "finish_reason": "stop"
                }]
            });
            if let Some((prompt, completion)) = usage {
                payload["usage"] = json!({
                    "prompt_tokens": prompt,
                    "completion_tokens": completion,
                    "total_tokens": prompt + completion,
                });
            }
            (StatusCode::OK, Json(payload))
        }
        CannedResponse::Failure { status, body } => (
            StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
            Json(json!({"error": body})),
        ),
    }
}
