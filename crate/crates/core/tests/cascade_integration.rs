//! Cascade routing over the full mock stack: cheap endpoint, expensive
//! endpoint, and a scripted judge.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use mrank_core::cascade::{
    build_reference_set, load_gold, load_query_rows, load_reference_rows, service, CascadeEngine,
    QueryRow, RefMode, ServedBy,
};
use mrank_core::client::mock::{CannedResponse, MockScript, MockServer};
use mrank_core::client::{ChatClient, EndpointRole};
use mrank_core::compare::{PromptComparator, PromptTemplate};
use mrank_core::rank::VoteConfig;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

struct MockStack {
    cheap: MockServer,
    expensive: MockServer,
    judge: MockServer,
}

impl MockStack {
    async fn start(
        cheap: Vec<CannedResponse>,
        expensive: Vec<CannedResponse>,
        judge: Vec<CannedResponse>,
    ) -> Self {
        Self {
            cheap: MockServer::start(MockScript::Sequence(cheap))
                .await
                .unwrap(),
            expensive: MockServer::start(MockScript::Sequence(expensive))
                .await
                .unwrap(),
            judge: MockServer::start(MockScript::Sequence(judge))
                .await
                .unwrap(),
        }
    }

    fn engine(&self, ref_mode: RefMode) -> CascadeEngine {
        let client = Arc::new(ChatClient::new());
        let rows = load_reference_rows(fixture("cascade_refs.jsonl")).unwrap();
        let refs = build_reference_set(&rows, ref_mode, false).unwrap();
        let judge = Arc::new(PromptComparator::new(
            Arc::new(ChatClient::new()),
            self.judge.endpoint("judge-model", EndpointRole::Judge),
            PromptTemplate::correctness_gpt(),
        ));
        CascadeEngine::new(
            client,
            self.cheap.endpoint("cheap-model", EndpointRole::OpenSource),
            self.expensive
                .endpoint("expensive-model", EndpointRole::ClosedSource),
            judge,
            VoteConfig::default(),
            refs,
        )
        .unwrap()
    }

    async fn shutdown(self) {
        self.cheap.shutdown().await;
        self.expensive.shutdown().await;
        self.judge.shutdown().await;
    }
}

/// Five references; judge verdicts for one query, all in reference order.
fn judge_round(verdict: &str) -> Vec<CannedResponse> {
    std::iter::repeat_with(|| CannedResponse::with_usage(verdict, 50, 2))
        .take(5)
        .collect()
}

#[tokio::test]
async fn reliable_response_never_touches_expensive_endpoint() {
    let stack = MockStack::start(
        vec![CannedResponse::with_usage("cheap answer (B)", 20, 8)],
        vec![CannedResponse::with_usage("never used", 1, 1)],
        judge_round("[1]"),
    )
    .await;
    let engine = stack.engine(RefMode::Theta);

    let result = engine.route(Some("q1".into()), "a question").await.unwrap();
    assert!(result.reliable);
    assert_eq!(result.served_by, ServedBy::Cheap);
    assert_eq!(result.final_response, "cheap answer (B)");
    assert!(result.usage_expensive.is_zero());
    assert_eq!(result.usage_cheap.total(), 28);
    assert_eq!(stack.expensive.requests_served(), 0);
    assert_eq!(stack.judge.requests_served(), 5);
    stack.shutdown().await;
}

#[tokio::test]
async fn unreliable_response_routes_to_expensive() {
    let stack = MockStack::start(
        vec![CannedResponse::with_usage("cheap answer", 20, 8)],
        vec![CannedResponse::with_usage("expensive answer", 40, 12)],
        judge_round("[2]"),
    )
    .await;
    let engine = stack.engine(RefMode::Theta);

    let result = engine.route(Some("q1".into()), "a question").await.unwrap();
    assert!(!result.reliable);
    assert_eq!(result.served_by, ServedBy::Expensive);
    assert_eq!(result.final_response, "expensive answer");
    assert_eq!(result.usage_expensive.total(), 52);
    // All-[2] verdicts with scores [1,1,1,-1,-1] under (1,0,-1): ranked
    // worse than positive references selects delta_minus (-1 each) and
    // worse than negative ones selects delta_plus ((-1)*1 each), total -5.
    assert_eq!(result.decision.total, -5.0);
    stack.shutdown().await;
}

#[tokio::test]
async fn expensive_failure_degrades_to_cheap_with_flag() {
    let stack = MockStack::start(
        vec![CannedResponse::with_usage("cheap answer", 20, 8)],
        vec![
            CannedResponse::failure(500, "down"),
            CannedResponse::failure(500, "down"),
            CannedResponse::failure(500, "down"),
        ],
        judge_round("[2]"),
    )
    .await;
    let engine = stack.engine(RefMode::Theta);

    let result = engine.route(Some("q1".into()), "a question").await.unwrap();
    assert!(!result.reliable);
    assert!(result.fallback_failed);
    assert_eq!(result.served_by, ServedBy::Cheap);
    assert_eq!(result.final_response, "cheap answer");
    assert!(result.usage_expensive.is_zero());
    stack.shutdown().await;
}

#[tokio::test]
async fn delta_mode_with_tied_evaluations_never_routes() {
    // References where both models score identically have delta 0, so no
    // vote can be non-zero and every total is 0 -> reliable.
    let rows_path = fixture("cascade_refs.jsonl");
    let rows: Vec<_> = load_reference_rows(&rows_path)
        .unwrap()
        .into_iter()
        .map(|mut r| {
            r.eval_expensive = Some(r.eval_theta);
            r
        })
        .collect();
    let refs = build_reference_set(&rows, RefMode::Delta, false).unwrap();
    assert!(refs.scores().iter().all(|s| *s == 0.0));

    let queries: Vec<QueryRow> = (0..4)
        .map(|i| QueryRow {
            id: format!("q{i}"),
            query: format!("question {i}"),
        })
        .collect();
    let stack = MockStack::start(
        (0..4)
            .map(|i| CannedResponse::with_usage(format!("answer {i}"), 10, 5))
            .collect(),
        vec![CannedResponse::text("never used")],
        (0..20)
            .map(|_| CannedResponse::with_usage("[2]", 5, 1))
            .collect(),
    )
    .await;
    let client = Arc::new(ChatClient::new());
    let judge = Arc::new(PromptComparator::new(
        Arc::new(ChatClient::new()),
        stack.judge.endpoint("judge", EndpointRole::Judge),
        PromptTemplate::correctness_gpt(),
    ));
    let engine = CascadeEngine::new(
        client,
        stack.cheap.endpoint("cheap", EndpointRole::OpenSource),
        stack
            .expensive
            .endpoint("expensive", EndpointRole::ClosedSource),
        judge,
        VoteConfig::default(),
        refs,
    )
    .unwrap();

    let report = engine.batch(&queries, None, false, 1).await;
    assert_eq!(report.routed_count, 0);
    assert_eq!(report.routed_fraction, 0.0);
    assert_eq!(report.expensive_api_tokens, 0);
    assert!(report.results.iter().all(|r| r.decision.all_zero_scores));
    assert_eq!(stack.expensive.requests_served(), 0);
    stack.shutdown().await;
}

#[tokio::test]
async fn batch_counts_and_quality() {
    let queries = load_query_rows(fixture("cascade_queries.jsonl")).unwrap();
    let gold = load_gold(fixture("cascade_gold.jsonl")).unwrap();
    assert_eq!(queries.len(), 10);

    // Queries q03, q05, q08, q10 get routed (judge answers [2] on their
    // rounds); everything else stays cheap.
    let routed_ids = ["q03", "q05", "q08", "q10"];
    let mut judge_script = Vec::new();
    for row in &queries {
        let verdict = if routed_ids.contains(&row.id.as_str()) {
            "[2]"
        } else {
            "[1]"
        };
        judge_script.extend(judge_round(verdict));
    }
    // Cheap answers: correct letter for unrouted, wrong for routed ones.
    let cheap_script: Vec<CannedResponse> = queries
        .iter()
        .map(|row| {
            let text = if routed_ids.contains(&row.id.as_str()) {
                "the answer is (D)".to_string()
            } else {
                format!("the answer is ({})", gold[&row.id])
            };
            CannedResponse::with_usage(text, 30, 10)
        })
        .collect();
    let expensive_script: Vec<CannedResponse> = routed_ids
        .iter()
        .map(|id| CannedResponse::with_usage(format!("the answer is ({})", gold[*id]), 60, 15))
        .collect();

    let stack = MockStack::start(cheap_script, expensive_script, judge_script).await;
    let engine = stack.engine(RefMode::Theta);
    let report = engine.batch(&queries, Some(&gold), false, 1).await;

    assert_eq!(report.total_queries, 10);
    assert_eq!(report.routed_count, 4);
    assert!((report.routed_fraction - 0.4).abs() < 1e-12);
    // Four routed calls at 75 tokens each.
    assert_eq!(report.expensive_api_tokens, 4 * 75);
    assert_eq!(report.tokens.cheap.total(), 10 * 40);
    // Token conservation against per-result usage.
    let sum: u64 = report
        .results
        .iter()
        .map(|r| r.usage_expensive.total())
        .sum();
    assert_eq!(report.expensive_api_tokens, sum);
    // Expensive answers fixed every routed query; cheap ones were right
    // on the rest, so final quality is perfect.
    let quality = report.quality.unwrap();
    assert_eq!(quality.graded, 10);
    assert_eq!(quality.correct, 10);
    // gold letters for q03/q05/q08/q10 are all != D, so the cheap answers
    // would have been wrong on those four.
    assert!(report.results.iter().all(|r| {
        (r.served_by == ServedBy::Expensive) == routed_ids.contains(&r.id.as_deref().unwrap())
    }));
    stack.shutdown().await;
}

#[tokio::test]
async fn baseline_mode_measures_relative_tokens() {
    // Everything routes, so the measured baseline equals the serving
    // usage and the relative value is exactly 1.
    let queries: Vec<QueryRow> = (0..3)
        .map(|i| QueryRow {
            id: format!("q{i}"),
            query: format!("question {i}"),
        })
        .collect();
    let stack = MockStack::start(
        (0..3)
            .map(|_| CannedResponse::with_usage("cheap", 10, 5))
            .collect(),
        (0..3)
            .map(|_| CannedResponse::with_usage("expensive", 50, 20))
            .collect(),
        (0..15)
            .map(|_| CannedResponse::with_usage("[2]", 5, 1))
            .collect(),
    )
    .await;
    let engine = stack.engine(RefMode::Theta);
    let report = engine.batch(&queries, None, true, 1).await;

    assert_eq!(report.routed_count, 3);
    assert_eq!(report.expensive_api_tokens, 3 * 70);
    assert_eq!(report.baseline_api_tokens, Some(3 * 70));
    assert_eq!(report.relative_api_tokens, Some(1.0));
    assert!(!report.relative_api_tokens_estimated);
    // No shadow calls were needed: everything already routed.
    assert_eq!(stack.expensive.requests_served(), 3);
    stack.shutdown().await;
}

#[tokio::test]
async fn oracle_judge_quality_bounds_cheap_accuracy() {
    // Binary cheap-model evals as reference scores, the oracle as judge,
    // and an expensive model that always answers correctly: the final
    // quality can never drop below the cheap model's own accuracy.
    let gold: HashMap<String, String> = (0..10)
        .map(|i| (format!("q{i}"), "A".to_string()))
        .collect();
    let queries: Vec<QueryRow> = (0..10)
        .map(|i| QueryRow {
            id: format!("q{i}"),
            query: format!("question {i}"),
        })
        .collect();
    // Cheap model errs on i = 0, 5, 7.
    let cheap_correct: Vec<bool> = (0..10).map(|i| i % 5 != 0 && i % 7 != 0).collect();
    let cheap_accuracy =
        cheap_correct.iter().filter(|c| **c).count() as f64 / cheap_correct.len() as f64;

    let cheap_script: Vec<CannedResponse> = cheap_correct
        .iter()
        .map(|&ok| CannedResponse::with_usage(if ok { "(A)" } else { "(B)" }, 10, 4))
        .collect();
    let expensive_script: Vec<CannedResponse> = (0..10)
        .map(|_| CannedResponse::with_usage("the answer is (A)", 40, 10))
        .collect();

    let cheap_server = MockServer::start(MockScript::Sequence(cheap_script))
        .await
        .unwrap();
    let expensive_server = MockServer::start(MockScript::Sequence(expensive_script))
        .await
        .unwrap();

    let rows = load_reference_rows(fixture("cascade_refs.jsonl")).unwrap();
    let refs = build_reference_set(&rows, RefMode::Theta, false).unwrap();
    assert_eq!(refs.scores(), vec![1.0, 1.0, 1.0, -1.0, -1.0]);

    // Oracle truth per target: the cheap response's actual correctness.
    let truths: HashMap<String, f64> = queries
        .iter()
        .zip(&cheap_correct)
        .map(|(q, &ok)| (q.id.clone(), if ok { 1.0 } else { -1.0 }))
        .collect();
    let judge = Arc::new(mrank_core::compare::OracleComparator::new(truths));

    let engine = CascadeEngine::new(
        Arc::new(ChatClient::new()),
        cheap_server.endpoint("cheap", EndpointRole::OpenSource),
        expensive_server.endpoint("expensive", EndpointRole::ClosedSource),
        judge,
        VoteConfig::mmlu(),
        refs,
    )
    .unwrap();
    let report = engine.batch(&queries, Some(&gold), false, 1).await;

    let quality = report.quality.unwrap();
    assert!(
        quality.score >= cheap_accuracy,
        "cascade quality {} fell below cheap accuracy {cheap_accuracy}",
        quality.score
    );
    // The oracle routes exactly the incorrect cheap responses here, so
    // the always-correct expensive model lifts quality to 1.
    assert_eq!(quality.score, 1.0);
    assert_eq!(report.routed_count, 3);
    cheap_server.shutdown().await;
    expensive_server.shutdown().await;
}

#[tokio::test]
async fn http_service_routes_and_counts() {
    let queries = 3;
    let mut judge_script = Vec::new();
    for i in 0..queries {
        judge_script.extend(judge_round(if i == 1 { "[2]" } else { "[1]" }));
    }
    let stack = MockStack::start(
        (0..queries)
            .map(|i| CannedResponse::with_usage(format!("cheap {i}"), 10, 5))
            .collect(),
        vec![CannedResponse::with_usage("expensive 1", 50, 20)],
        judge_script,
    )
    .await;
    let engine = stack.engine(RefMode::Theta);
    let running = service::spawn(engine, "127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", running.addr);
    let http = reqwest::Client::new();

    let health: serde_json::Value = http
        .get(format!("{base}/v1/health"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(health["status"], "ok");

    let mut served = Vec::new();
    for i in 0..queries {
        let resp = http
            .post(format!("{base}/v1/route"))
            .json(&serde_json::json!({"query": format!("question {i}"), "id": format!("q{i}")}))
            .send()
            .await
            .unwrap();
        assert_eq!(resp.status(), 200);
        let body: serde_json::Value = resp.json().await.unwrap();
        served.push(body["served_by"].as_str().unwrap().to_string());
    }
    assert_eq!(served, vec!["cheap", "expensive", "cheap"]);

    let metrics: serde_json::Value = http
        .get(format!("{base}/v1/metrics"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(metrics["requests"], 3);
    assert_eq!(metrics["routed"], 1);
    assert_eq!(metrics["tokens"]["expensive"]["prompt"], 50);
    assert!(metrics["tokens"]["judge"]["prompt"].as_u64().unwrap() > 0);

    // Malformed bodies are a 400 with an error code, not a crash.
    let bad = http
        .post(format!("{base}/v1/route"))
        .header("content-type", "application/json")
        .body("{not json")
        .send()
        .await
        .unwrap();
    assert_eq!(bad.status(), 400);
    let body: serde_json::Value = bad.json().await.unwrap();
    assert_eq!(body["error"], "bad_request");

    let empty = http
        .post(format!("{base}/v1/route"))
        .json(&serde_json::json!({"query": ""}))
        .send()
        .await
        .unwrap();
    assert_eq!(empty.status(), 400);

    running.stop().await;
    stack.shutdown().await;
}
