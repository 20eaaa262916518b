//! Model cascading: serve from the cheap endpoint, judge the response
//! against scored references, and fall back to the expensive endpoint
//! only when the judgment says unreliable.
//!
//! Reference scores come from dev-set evaluations of the cheap model,
//! either directly (`theta` mode) or as the cheap-minus-expensive gap
//! (`delta` mode), which grants positive scores only where the cheap
//! model beat the expensive one.

pub mod service;

use std::collections::HashMap;
use std::sync::Arc;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ChatClient, ChatRequest, ClientError, EndpointConfig, Usage};
use crate::compare::Comparator;
use crate::detect::extract_choice;
use crate::pair::{QueryResponsePair, ReferenceSet, ScoredReference};
use crate::rank::{meta_rank, JudgeError, MetaRankDecision, VoteConfig};

#[derive(Debug, Error)]
pub enum CascadeError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Load {
        path: String,
        line: usize,
        message: String,
    },
    #[error("cheap endpoint failure: {0}")]
    CheapEndpoint(#[source] ClientError),
    #[error("judge failure: {0}")]
    Judge(#[source] JudgeError),
    #[error("failed to bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Input(String),
}

/// How reference reliability scores are derived from dev-set evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefMode {
    /// Use the cheap model's evaluation directly.
    Theta,
    /// Cheap minus expensive evaluation per query.
    Delta,
}

/// Derive per-reference scores: `theta` passes the cheap evaluations
/// through; `delta` subtracts the expensive model's evaluation from the
/// cheap model's, element-wise.
pub fn derive_reference_scores(
    mode: RefMode,
    evals_cheap: &[f64],
    evals_expensive: Option<&[f64]>,
) -> Result<Vec<f64>, CascadeError> {
    match mode {
        RefMode::Theta => Ok(evals_cheap.to_vec()),
        RefMode::Delta => {
            let expensive = evals_expensive.ok_or_else(|| {
                CascadeError::Input(
                    "delta mode requires expensive-model evaluations for every reference".into(),
                )
            })?;
            if expensive.len() != evals_cheap.len() {
                return Err(CascadeError::Input(format!(
                    "evaluation length mismatch: {} cheap vs {} expensive",
                    evals_cheap.len(),
                    expensive.len()
                )));
            }
            Ok(evals_cheap
                .iter()
                .zip(expensive)
                .map(|(c, e)| c - e)
                .collect())
        }
    }
}

/// One dev-set reference row: the cheap model's response to a dev query
/// plus evaluation results for score derivation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceRow {
    pub id: String,
    pub query: String,
    pub response: String,
    pub eval_theta: f64,
    #[serde(default)]
    pub eval_expensive: Option<f64>,
}

/// Load JSON Lines reference rows.
pub fn load_reference_rows(
    path: impl AsRef<std::path::Path>,
) -> Result<Vec<ReferenceRow>, CascadeError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CascadeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ReferenceRow = serde_json::from_str(line).map_err(|e| CascadeError::Load {
            path: path.display().to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Turn reference rows into a scored reference set under the given mode.
pub fn build_reference_set(
    rows: &[ReferenceRow],
    mode: RefMode,
    drop_zero_scores: bool,
) -> Result<ReferenceSet, CascadeError> {
    let cheap: Vec<f64> = rows.iter().map(|r| r.eval_theta).collect();
    let expensive: Option<Vec<f64>> = rows.iter().map(|r| r.eval_expensive).collect();
    let scores = derive_reference_scores(mode, &cheap, expensive.as_deref())?;
    let references = rows
        .iter()
        .zip(scores)
        .map(|(row, score)| {
            let pair = QueryResponsePair::new(row.query.clone(), row.response.clone())
                .map_err(|e| CascadeError::Input(format!("reference {}: {e}", row.id)))?
                .with_id(row.id.clone());
            ScoredReference::new(pair, score)
                .map_err(|e| CascadeError::Input(format!("reference {}: {e}", row.id)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let set = ReferenceSet::new(references).map_err(|e| CascadeError::Input(e.to_string()))?;
    if drop_zero_scores {
        set.without_zero_scores()
            .map_err(|_| CascadeError::Input("dropping zero-score references left none".into()))
    } else {
        Ok(set)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ServedBy {
    Cheap,
    Expensive,
}

/// The full routing trace for one query.
#[derive(Debug, Clone, Serialize)]
pub struct RouteResult {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub query: String,
    pub cheap_response: String,
    pub reliable: bool,
    pub served_by: ServedBy,
    pub final_response: String,
    pub decision: MetaRankDecision,
    pub usage_cheap: Usage,
    /// All-zero when the expensive endpoint was not called.
    pub usage_expensive: Usage,
    /// The judgment said route, but the expensive endpoint failed; the
    /// cheap response was served instead of failing the request.
    pub fallback_failed: bool,
}

/// A prepared cascade: both endpoints, the judge, and the reference set.
pub struct CascadeEngine {
    client: Arc<ChatClient>,
    cheap: EndpointConfig,
    expensive: EndpointConfig,
    judge: Arc<dyn Comparator>,
    vote: VoteConfig,
    refs: ReferenceSet,
    max_tokens: u32,
}

impl CascadeEngine {
    pub fn new(
        client: Arc<ChatClient>,
        cheap: EndpointConfig,
        expensive: EndpointConfig,
        judge: Arc<dyn Comparator>,
        vote: VoteConfig,
        refs: ReferenceSet,
    ) -> Result<Self, CascadeError> {
        cheap
            .validate()
            .map_err(|e| CascadeError::Input(format!("cheap endpoint: {e}")))?;
        expensive
            .validate()
            .map_err(|e| CascadeError::Input(format!("expensive endpoint: {e}")))?;
        Ok(Self {
            client,
            cheap,
            expensive,
            judge,
            vote,
            refs,
            max_tokens: 512,
        })
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn judge_usage(&self) -> Option<Usage> {
        self.judge.usage_totals()
    }

    async fn ask(
        &self,
        endpoint: &EndpointConfig,
        query: &str,
    ) -> Result<(String, Usage), ClientError> {
        let request = ChatRequest::deterministic(query, self.max_tokens)?;
        let completion = self.client.chat_complete(endpoint, &request).await?;
        Ok((completion.text, completion.usage))
    }

    /// Serve one query: cheap response, judgment, and fallback when
    /// unreliable. The expensive endpoint is not touched for reliable
    /// responses.
    pub async fn route(
        &self,
        id: Option<String>,
        query: &str,
    ) -> Result<RouteResult, CascadeError> {
        let (cheap_response, usage_cheap) = self
            .ask(&self.cheap, query)
            .await
            .map_err(CascadeError::CheapEndpoint)?;

        let mut target = QueryResponsePair::new(query, cheap_response.clone())
            .map_err(|e| CascadeError::Input(e.to_string()))?;
        if let Some(id) = &id {
            target = target.with_id(id.clone());
        }
        let decision = meta_rank(&target, &self.refs, &self.vote, self.judge.as_ref())
            .await
            .map_err(CascadeError::Judge)?;

        if decision.reliable {
            return Ok(RouteResult {
                id,
                query: query.to_string(),
                cheap_response: cheap_response.clone(),
                reliable: true,
                served_by: ServedBy::Cheap,
                final_response: cheap_response,
                decision,
                usage_cheap,
                usage_expensive: Usage::default(),
                fallback_failed: false,
            });
        }

        match self.ask(&self.expensive, query).await {
            Ok((expensive_response, usage_expensive)) => Ok(RouteResult {
                id,
                query: query.to_string(),
                cheap_response,
                reliable: false,
                served_by: ServedBy::Expensive,
                final_response: expensive_response,
                decision,
                usage_cheap,
                usage_expensive,
                fallback_failed: false,
            }),
            Err(e) => {
                tracing::warn!(error = %e, "expensive endpoint failed after routing; serving cheap response");
                Ok(RouteResult {
                    id,
                    query: query.to_string(),
                    cheap_response: cheap_response.clone(),
                    reliable: false,
                    served_by: ServedBy::Cheap,
                    final_response: cheap_response,
                    decision,
                    usage_cheap,
                    usage_expensive: Usage::default(),
                    fallback_failed: true,
                })
            }
        }
    }
}

/// One input query for batch routing.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRow {
    pub id: String,
    pub query: String,
}

pub fn load_query_rows(path: impl AsRef<std::path::Path>) -> Result<Vec<QueryRow>, CascadeError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CascadeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: QueryRow = serde_json::from_str(line).map_err(|e| CascadeError::Load {
            path: path.display().to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Load JSON Lines gold answers `{"id", "gold"}`.
pub fn load_gold(
    path: impl AsRef<std::path::Path>,
) -> Result<HashMap<String, String>, CascadeError> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Row {
        id: String,
        gold: String,
    }
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CascadeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut map = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Row = serde_json::from_str(line).map_err(|e| CascadeError::Load {
            path: path.display().to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        map.insert(row.id, row.gold);
    }
    Ok(map)
}

/// A single-letter gold answer is graded by choice extraction; anything
/// else by exact trimmed equality.
pub fn grade_against_gold(response: &str, gold: &str) -> bool {
    let gold = gold.trim();
    if gold.len() == 1 && gold.chars().all(|c| c.is_ascii_uppercase()) {
        extract_choice(response, |l| {
            l == gold || matches!(l, "A" | "B" | "C" | "D" | "E")
        })
        .as_deref()
            == Some(gold)
    } else {
        response.trim() == gold
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RouteFailure {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct TokenReport {
    pub cheap: Usage,
    pub expensive: Usage,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub judge: Option<Usage>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct QualityReport {
    pub graded: usize,
    pub correct: usize,
    /// Fraction of graded final responses judged correct.
    pub score: f64,
}

#[derive(Debug, Serialize)]
pub struct CascadeReport {
    pub results: Vec<RouteResult>,
    pub failures: Vec<RouteFailure>,
    pub total_queries: usize,
    pub routed_count: usize,
    pub routed_fraction: f64,
    /// No queries were judged; the routed fraction is reported as 0.
    pub degenerate_empty: bool,
    pub tokens: TokenReport,
    /// Tokens consumed on the expensive endpoint while serving.
    pub expensive_api_tokens: u64,
    /// Always-expensive token baseline: measured when baseline calls were
    /// made, estimated otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_api_tokens: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relative_api_tokens: Option<f64>,
    pub relative_api_tokens_estimated: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quality: Option<QualityReport>,
}

impl CascadeEngine {
    /// Route every query; per-query failures are recorded and the batch
    /// continues. With `baseline` set, unrouted queries also get a shadow
    /// expensive call (never served) so the always-expensive token
    /// baseline is measured instead of estimated.
    pub async fn batch(
        &self,
        queries: &[QueryRow],
        gold: Option<&HashMap<String, String>>,
        baseline: bool,
        concurrency: usize,
    ) -> CascadeReport {
        let concurrency = concurrency.max(1);
        let routed_results = stream::iter(queries.iter().map(|row| async move {
            let result = self.route(Some(row.id.clone()), &row.query).await;
            (row.id.clone(), result)
        }))
        .buffered(concurrency)
        .collect::<Vec<_>>()
        .await;

        let mut results = Vec::new();
        let mut failures = Vec::new();
        for (id, outcome) in routed_results {
            match outcome {
                Ok(r) => results.push(r),
                Err(e) => failures.push(RouteFailure {
                    id,
                    error: e.to_string(),
                }),
            }
        }

        let mut tokens = TokenReport::default();
        for r in &results {
            tokens.cheap.add(&r.usage_cheap);
            tokens.expensive.add(&r.usage_expensive);
        }
        tokens.judge = self.judge_usage();

        let routed_count = results
            .iter()
            .filter(|r| r.served_by == ServedBy::Expensive)
            .count();
        let expensive_api_tokens = tokens.expensive.total();

        let (baseline_api_tokens, relative_estimated) = if baseline {
            let mut total = expensive_api_tokens;
            for r in &results {
                if r.served_by == ServedBy::Expensive {
                    continue;
                }
                match self.ask(&self.expensive, &r.query).await {
                    Ok((_, usage)) => total += usage.total(),
                    Err(e) => {
                        tracing::warn!(error = %e, "baseline expensive call failed; baseline undercounts");
                    }
                }
            }
            (Some(total), false)
        } else if results.is_empty() {
            (None, true)
        } else {
            // Estimate: prompt side from the query text, completion side
            // from the mean of observed expensive completions.
            let mean_completion = if routed_count > 0 {
                results
                    .iter()
                    .map(|r| r.usage_expensive.completion_tokens)
                    .sum::<u64>()
                    / routed_count as u64
            } else {
                0
            };
            let total: u64 = results
                .iter()
                .map(|r| crate::client::estimate_tokens(&r.query) + mean_completion)
                .sum();
            (Some(total), true)
        };

        let relative_api_tokens = baseline_api_tokens
            .and_then(|b| (b > 0).then(|| expensive_api_tokens as f64 / b as f64));

        let quality = gold.map(|gold_map| {
            let mut graded = 0;
            let mut correct = 0;
            for r in &results {
                let Some(id) = &r.id else { continue };
                let Some(expected) = gold_map.get(id) else {
                    continue;
                };
                graded += 1;
                if grade_against_gold(&r.final_response, expected) {
                    correct += 1;
                }
            }
            QualityReport {
                graded,
                correct,
                score: if graded > 0 {
                    correct as f64 / graded as f64
                } else {
                    0.0
                },
            }
        });

        let judged = results.len();
        CascadeReport {
            total_queries: queries.len(),
            routed_count,
            routed_fraction: if judged > 0 {
                routed_count as f64 / judged as f64
            } else {
                0.0
            },
            degenerate_empty: judged == 0,
            results,
            failures,
            tokens,
            expensive_api_tokens,
            baseline_api_tokens,
            relative_api_tokens,
            relative_api_tokens_estimated: relative_estimated,
            quality,
        }
    }
}
