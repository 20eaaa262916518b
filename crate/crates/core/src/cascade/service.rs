//! HTTP routing service around a prepared cascade.
//!
//! `POST /v1/route` serves one query, `GET /v1/health` liveness,
//! `GET /v1/metrics` counters. Shuts down gracefully on ctrl-c.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use super::{CascadeEngine, CascadeError, ServedBy};

#[derive(Default)]
struct Metrics {
    requests: AtomicU64,
    routed: AtomicU64,
    comparator_failures: AtomicU64,
    fallback_failures: AtomicU64,
    tokens_cheap_prompt: AtomicU64,
    tokens_cheap_completion: AtomicU64,
    tokens_expensive_prompt: AtomicU64,
    tokens_expensive_completion: AtomicU64,
}

struct ServiceState {
    engine: CascadeEngine,
    metrics: Metrics,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RouteBody {
    query: String,
    #[serde(default)]
    id: Option<String>,
}

fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/v1/route", post(handle_route))
        .route("/v1/health", get(handle_health))
        .route("/v1/metrics", get(handle_metrics))
        .with_state(state)
}

async fn handle_route(
    State(state): State<Arc<ServiceState>>,
    body: Result<Json<RouteBody>, JsonRejection>,
) -> impl IntoResponse {
    let Json(body) = match body {
        Ok(b) => b,
        Err(rejection) => {
            return (
                StatusCode::BAD_REQUEST,
                Json(json!({"error": "bad_request", "detail": rejection.body_text()})),
            )
                .into_response();
        }
    };
    if body.query.is_empty() {
        return (
            StatusCode::BAD_REQUEST,
            Json(json!({"error": "bad_request", "detail": "query must be non-empty"})),
        )
            .into_response();
    }

    state.metrics.requests.fetch_add(1, Ordering::Relaxed);
    match state.engine.route(body.id, &body.query).await {
        Ok(result) => {
            if result.served_by == ServedBy::Expensive {
                state.metrics.routed.fetch_add(1, Ordering::Relaxed);
            }
            if result.fallback_failed {
                state
                    .metrics
                    .fallback_failures
                    .fetch_add(1, Ordering::Relaxed);
            }
            let m = &state.metrics;
            m.tokens_cheap_prompt
                .fetch_add(result.usage_cheap.prompt_tokens, Ordering::Relaxed);
            m.tokens_cheap_completion
                .fetch_add(result.usage_cheap.completion_tokens, Ordering::Relaxed);
            m.tokens_expensive_prompt
                .fetch_add(result.usage_expensive.prompt_tokens, Ordering::Relaxed);
            m.tokens_expensive_completion
                .fetch_add(result.usage_expensive.completion_tokens, Ordering::Relaxed);
            (
                StatusCode::OK,
                Json(serde_json::to_value(&result).expect("serializable")),
            )
                .into_response()
        }
        Err(e) => {
            if matches!(e, CascadeError::Judge(_)) {
                state
                    .metrics
                    .comparator_failures
                    .fetch_add(1, Ordering::Relaxed);
            }
            (
                StatusCode::BAD_GATEWAY,
                Json(json!({"error": "upstream_failure", "detail": e.to_string()})),
            )
                .into_response()
        }
    }
}

async fn handle_health() -> impl IntoResponse {
    Json(json!({"status": "ok"}))
}

async fn handle_metrics(State(state): State<Arc<ServiceState>>) -> impl IntoResponse {
    let m = &state.metrics;
    let mut body = json!({
        "requests": m.requests.load(Ordering::Relaxed),
        "routed": m.routed.load(Ordering::Relaxed),
        "comparator_failures": m.comparator_failures.load(Ordering::Relaxed),
        "fallback_failures": m.fallback_failures.load(Ordering::Relaxed),
        "tokens": {
            "cheap": {
                "prompt": m.tokens_cheap_prompt.load(Ordering::Relaxed),
                "completion": m.tokens_cheap_completion.load(Ordering::Relaxed),
            },
            "expensive": {
                "prompt": m.tokens_expensive_prompt.load(Ordering::Relaxed),
                "completion": m.tokens_expensive_completion.load(Ordering::Relaxed),
            },
        },
    });
    if let Some(judge) = state.engine.judge_usage() {
        body["tokens"]["judge"] = json!({
            "prompt": judge.prompt_tokens,
            "completion": judge.completion_tokens,
            "estimated": judge.estimated,
        });
    }
    Json(body)
}

/// A service spawned for tests or embedding: call `stop` to shut it down.
pub struct RunningService {
    pub addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    handle: JoinHandle<()>,
}

impl RunningService {
    pub async fn stop(mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        let _ = (&mut self.handle).await;
    }
}

impl Drop for RunningService {
    fn drop(&mut self) {
        self.handle.abort();
    }
}

/// Bind and spawn the service, returning its actual address.
pub async fn spawn(engine: CascadeEngine, listen: &str) -> Result<RunningService, CascadeError> {
    let listener = tokio::net::TcpListener::bind(listen)
        .await
        .map_err(|source| CascadeError::Bind {
            addr: listen.to_string(),
            source,
        })?;
    let addr = listener.local_addr().map_err(|source| CascadeError::Bind {
        addr: listen.to_string(),
        source,
    })?;
    let state = Arc::new(ServiceState {
        engine,
        metrics: Metrics::default(),
    });
    let (stop, stopped) = oneshot::channel::<()>();
    let handle = tokio::spawn(async move {
        let _ = axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = stopped.await;
            })
            .await;
    });
    Ok(RunningService {
        addr,
        stop: Some(stop),
        handle,
    })
}

/// Run the service in the foreground until ctrl-c.
pub async fn serve(engine: CascadeEngine, listen: &str) -> Result<(), CascadeError> {
    let listener = tokio::net::TcpListener::bind(listen)
        .await
        .map_err(|source| CascadeError::Bind {
            addr: listen.to_string(),
            source,
        })?;
    let addr = listener.local_addr().map_err(|source| CascadeError::Bind {
        addr: listen.to_string(),
        source,
    })?;
    tracing::info!(%addr, "routing service listening");
    let state = Arc::new(ServiceState {
        engine,
        metrics: Metrics::default(),
    });
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down");
        })
        .await
        .map_err(|source| CascadeError::Bind {
            addr: addr.to_string(),
            source,
        })
}
