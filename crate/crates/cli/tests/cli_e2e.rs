//! CLI behavior end to end: exit codes, reports, manifests, and config
//! validation through the real binary.

use std::path::PathBuf;
use std::process::{Command, Output};

use mrank_core::client::mock::{CannedResponse, MockScript, MockServer};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

fn mrank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrank"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

#[test]
fn help_exits_zero() {
    let out = mrank(&["--help"]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("detect"));
    assert!(stdout(&out).contains("cascade"));
}

#[test]
fn missing_required_flag_is_usage_error() {
    let out = mrank(&["detect"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--dataset"));
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let out = mrank(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_typo_fails_with_suggestion() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"vote": {"detla_plus": 1.0, "delta_zero": 0.0, "delta_minus": -1.0}}"#,
    )
    .unwrap();
    let out = mrank(&[
        "--config",
        config.to_str().unwrap(),
        "loss",
        "pkto",
        "--batch",
        fixture("loss_batch.jsonl").to_str().unwrap(),
        "--beta",
        "0.1",
        "--out",
        dir.path().join("r.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("detla_plus"), "{err}");
    assert!(err.contains("did you mean `delta_plus`"), "{err}");
}

#[test]
fn loss_pkto_report_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("pkto.json");
    let out = mrank(&[
        "loss",
        "pkto",
        "--batch",
        fixture("loss_batch.jsonl").to_str().unwrap(),
        "--beta",
        "0.2",
        "--lambda-low",
        "1.5",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();

    let batch = mrank_cli::commands::loss::load_sample_batch(&fixture("loss_batch.jsonl")).unwrap();
    let cfg =
        mrank_core::loss::LossConfig::new(0.2, 1.0, 1.5, mrank_core::loss::ZRefMode::Zero).unwrap();
    let expected = mrank_core::loss::pkto_loss(&batch, &cfg).unwrap();
    assert!((report["loss"].as_f64().unwrap() - expected.loss).abs() < 1e-12);
    assert_eq!(report["per_sample"].as_array().unwrap().len(), 6);

    // Sibling manifest with verifying digests.
    let manifest: mrank_cli::manifest::RunManifest = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("pkto.json.manifest.json")).unwrap(),
    )
    .unwrap();
    assert!(manifest.verify().unwrap());
}

#[test]
fn loss_dpo_conventions_differ() {
    let dir = tempfile::tempdir().unwrap();
    let mut losses = Vec::new();
    for (name, convention) in [("d.json", "default"), ("s.json", "standard")] {
        let out_path = dir.path().join(name);
        let out = mrank(&[
            "loss",
            "dpo",
            "--batch",
            fixture("dpo_batch.jsonl").to_str().unwrap(),
            "--beta",
            "0.5",
            "--convention",
            convention,
            "--out",
            out_path.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
        losses.push(report["loss"].as_f64().unwrap());
    }
    assert!(
        (losses[0] - losses[1]).abs() > 1e-6,
        "conventions should disagree: {losses:?}"
    );
}

#[test]
fn gradcheck_passes_and_fails_by_exit_code() {
    let ok = mrank(&[
        "loss",
        "gradcheck",
        "--loss",
        "pkto",
        "--batch",
        fixture("loss_batch.jsonl").to_str().unwrap(),
        "--beta",
        "0.2",
        "--h",
        "1e-5",
        "--tol",
        "1e-4",
    ]);
    assert!(ok.status.success(), "{}", stderr(&ok));
    assert!(stdout(&ok).contains("PASS"));

    // An absurd tolerance cannot be met by central differences.
    let fail = mrank(&[
        "loss",
        "gradcheck",
        "--loss",
        "kto",
        "--batch",
        fixture("loss_batch.jsonl").to_str().unwrap(),
        "--beta",
        "0.2",
        "--tol",
        "1e-18",
    ]);
    assert_eq!(fail.status.code(), Some(1));
    assert!(stdout(&fail).contains("FAIL"));
}

#[test]
fn loss_z_ref_supplied_requires_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = mrank(&[
        "loss",
        "kto",
        "--batch",
        fixture("loss_batch.jsonl").to_str().unwrap(),
        "--beta",
        "0.2",
        "--z-ref-mode",
        "supplied",
        "--out",
        dir.path().join("r.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--z-ref"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn detect_with_oracle_comparator_runs_offline() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("report.json");
    let out = mrank(&[
        "detect",
        "--dataset",
        fixture("toy_mc.jsonl").to_str().unwrap(),
        "--responses",
        fixture("toy_responses.jsonl").to_str().unwrap(),
        "--comparator",
        "oracle",
        "--preset",
        "mmlu",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    // The oracle comparator is exact, so detection is perfect on the toy set.
    assert_eq!(report["metrics"]["precision"], 1.0);
    assert_eq!(report["metrics"]["recall"], 1.0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn detect_with_score_comparator() {
    let dir = tempfile::tempdir().unwrap();
    // Quality scores: references get their graded sign, targets get a
    // score matching their correctness, so score comparison mirrors the
    // oracle.
    let items = mrank_core::detect::load_mc_dataset(fixture("toy_mc.jsonl")).unwrap();
    let responses = mrank_core::detect::load_responses(fixture("toy_responses.jsonl")).unwrap();
    let scores_path = dir.path().join("scores.jsonl");
    let mut lines = Vec::new();
    for item in &items {
        let graded = mrank_core::detect::grade_response(&responses[&item.id], item);
        lines.push(format!(
            r#"{{"id": "{}", "score": {}}}"#,
            item.id, graded.score
        ));
    }
    std::fs::write(&scores_path, lines.join("\n") + "\n").unwrap();

    let out_path = dir.path().join("report.json");
    let out = mrank(&[
        "detect",
        "--dataset",
        fixture("toy_mc.jsonl").to_str().unwrap(),
        "--responses",
        fixture("toy_responses.jsonl").to_str().unwrap(),
        "--comparator",
        "score",
        "--scores",
        scores_path.to_str().unwrap(),
        "--preset",
        "mmlu",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!(report["metrics"]["precision"], 1.0);
    assert_eq!(report["metrics"]["recall"], 1.0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn filter_cli_writes_partitions_and_manifest() {
    let dir = tempfile::tempdir().unwrap();

    // 2 reference generations, then 12 samples x 2 references of
    // judgments. Verdicts: plain "1" (keep) for most, "2" for two ids.
    let mut script = vec![
        CannedResponse::text("generated reference answer 0"),
        CannedResponse::text("generated reference answer 1"),
    ];
    let train =
        mrank_core::curation::load_instruction_dataset(fixture("instruct_train.jsonl")).unwrap();
    let drop_ids = ["s04", "s09"];
    for sample in &train {
        let verdict = if drop_ids.contains(&sample.id.as_str()) {
            "2"
        } else {
            "1"
        };
        for _ in 0..2 {
            script.push(CannedResponse::with_usage(verdict, 30, 1));
        }
    }
    let server = MockServer::start(MockScript::Sequence(script))
        .await
        .unwrap();

    let config_path = dir.path().join("config.json");
    std::fs::write(
        &config_path,
        serde_json::to_string(&serde_json::json!({
            "endpoints": {
                "model": {"base_url": server.base_url(), "model": "tuned", "role": "open_source"},
                "judge": {"base_url": server.base_url(), "model": "judge", "role": "judge"}
            },
            "comparator": {"kind": "prompt", "judge_endpoint": "judge", "template": "instruction-quality"},
            "vote": {"preset": "instruct"}
        }))
        .unwrap(),
    )
    .unwrap();

    let out_dir = dir.path().join("filter_out");
    let out = mrank(&[
        "--config",
        config_path.to_str().unwrap(),
        "--concurrency",
        "1",
        "--audit",
        "filter",
        "--train",
        fixture("instruct_train.jsonl").to_str().unwrap(),
        "--epochs",
        "1",
        "--refs",
        "2",
        "--seed",
        "3",
        "--model-endpoint",
        "model",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    server.shutdown().await;

    let kept = std::fs::read_to_string(out_dir.join("kept.jsonl")).unwrap();
    let filtered = std::fs::read_to_string(out_dir.join("filtered.jsonl")).unwrap();
    assert_eq!(kept.lines().count(), 10);
    assert_eq!(filtered.lines().count(), 2);
    assert!(filtered.contains("s04") && filtered.contains("s09"));

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("filter_report.json")).unwrap())
            .unwrap();
    assert_eq!(summary["kept_count"], 10);
    assert_eq!(summary["filtered_count"], 2);
    assert_eq!(summary["epochs_completed"], 1);

    let manifest: mrank_cli::manifest::RunManifest = serde_json::from_str(
        &std::fs::read_to_string(out_dir.join("filter_report.json.manifest.json")).unwrap(),
    )
    .unwrap();
    assert!(manifest.verify().unwrap());

    // --audit recorded every endpoint exchange: 2 generations + 24 judgments.
    let audit = std::fs::read_to_string(out_dir.join("filter_report.json.audit.jsonl")).unwrap();
    assert_eq!(audit.lines().count(), 26);
}

#[test]
fn cascade_serve_bind_failure_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.json");
    std::fs::write(
        &config_path,
        serde_json::to_string(&serde_json::json!({
            "endpoints": {
                "cheap": {"base_url": "http://127.0.0.1:1", "model": "a", "role": "open_source"},
                "expensive": {"base_url": "http://127.0.0.1:1", "model": "b", "role": "closed_source"},
                "judge": {"base_url": "http://127.0.0.1:1", "model": "c", "role": "judge"}
            },
            "comparator": {"kind": "prompt", "judge_endpoint": "judge"},
            "cascade": {
                "cheap_endpoint": "cheap",
                "expensive_endpoint": "expensive",
                "ref_mode": "theta",
                "references_path": fixture("cascade_refs.jsonl").to_str().unwrap()
            }
        }))
        .unwrap(),
    )
    .unwrap();
    let out = mrank(&[
        "--config",
        config_path.to_str().unwrap(),
        "cascade",
        "serve",
        "--listen",
        "not-an-address",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("bind"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn cascade_batch_cli_routes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let queries = mrank_core::cascade::load_query_rows(fixture("cascade_queries.jsonl")).unwrap();

    let cheap_server = MockServer::start(MockScript::Sequence(
        queries
            .iter()
            .map(|q| CannedResponse::with_usage(format!("cheap answer for {}", q.id), 25, 10))
            .collect(),
    ))
    .await
    .unwrap();
    // Judge: route queries 1 and 6 (0-based), keep the rest.
    let mut judge_script = Vec::new();
    for (i, _) in queries.iter().enumerate() {
        let verdict = if i == 1 || i == 6 { "[2]" } else { "[1]" };
        for _ in 0..5 {
            judge_script.push(CannedResponse::with_usage(verdict, 40, 2));
        }
    }
    let judge_server = MockServer::start(MockScript::Sequence(judge_script))
        .await
        .unwrap();
    let expensive_server = MockServer::start(MockScript::Sequence(
        (0..2)
            .map(|i| CannedResponse::with_usage(format!("expensive answer {i}"), 90, 30))
            .collect(),
    ))
    .await
    .unwrap();

    let config_path = dir.path().join("config.json");
    std::fs::write(
        &config_path,
        serde_json::to_string(&serde_json::json!({
            "endpoints": {
                "cheap": {"base_url": cheap_server.base_url(), "model": "small", "role": "open_source"},
                "expensive": {"base_url": expensive_server.base_url(), "model": "large", "role": "closed_source"},
                "judge": {"base_url": judge_server.base_url(), "model": "judge", "role": "judge"}
            },
            "comparator": {"kind": "prompt", "judge_endpoint": "judge", "template": "correctness-gpt"},
            "vote": {"preset": "translation"},
            "cascade": {
                "cheap_endpoint": "cheap",
                "expensive_endpoint": "expensive",
                "ref_mode": "theta",
                "references_path": fixture("cascade_refs.jsonl").to_str().unwrap()
            }
        }))
        .unwrap(),
    )
    .unwrap();

    let out_path = dir.path().join("cascade.json");
    let out = mrank(&[
        "--config",
        config_path.to_str().unwrap(),
        "--concurrency",
        "1",
        "cascade",
        "batch",
        "--queries",
        fixture("cascade_queries.jsonl").to_str().unwrap(),
        "--gold",
        fixture("cascade_gold.jsonl").to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    cheap_server.shutdown().await;
    judge_server.shutdown().await;
    expensive_server.shutdown().await;

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!(report["total_queries"], 10);
    assert_eq!(report["routed_count"], 2);
    assert_eq!(report["expensive_api_tokens"], 240);
    assert_eq!(report["tokens"]["cheap"]["prompt_tokens"], 250);
    assert!(report["quality"]["graded"] == 10);
}
