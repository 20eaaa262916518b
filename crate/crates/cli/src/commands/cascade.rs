//! `mrank cascade serve|batch`: run the cheap-to-expensive router as an
//! HTTP service or over a query file.

use std::path::PathBuf;

use anyhow::{anyhow, Context, Result};

use mrank_core::cascade::{
    build_reference_set, load_gold, load_query_rows, load_reference_rows, service, CascadeEngine,
};

use crate::manifest::write_report;

use super::{build_judge, Global, JudgeSpec};

fn build_engine(global: &Global, report_path: Option<&std::path::Path>) -> Result<CascadeEngine> {
    let cascade_cfg = global
        .config
        .cascade
        .as_ref()
        .context("config has no `cascade` section")?;
    let cheap = global.config.endpoint(&cascade_cfg.cheap_endpoint)?;
    let expensive = global.config.endpoint(&cascade_cfg.expensive_endpoint)?;

    let rows = load_reference_rows(&cascade_cfg.references_path)?;
    let refs = build_reference_set(
        &rows,
        cascade_cfg.ref_mode,
        cascade_cfg.drop_zero_score_refs,
    )?;

    let client = global.client(report_path)?;
    let judge = build_judge(
        global,
        client.clone(),
        &JudgeSpec {
            kind: None,
            judge_endpoint: None,
            template: None,
            template_path: None,
            template_format: None,
            scores_path: None,
            tie_epsilon: None,
            default_template: "correctness",
        },
    )?;
    let vote = global.config.vote_config(None, None)?;

    Ok(
        CascadeEngine::new(client, cheap, expensive, judge, vote, refs)
            .map_err(|e| anyhow!(e))?
            .with_max_tokens(cascade_cfg.max_tokens),
    )
}

pub async fn serve(global: &Global, listen: String) -> Result<()> {
    let engine = build_engine(global, None)?;
    service::serve(engine, &listen)
        .await
        .map_err(|e| anyhow!(e))
}

pub struct BatchArgs {
    pub queries: PathBuf,
    pub gold: Option<PathBuf>,
    pub baseline: bool,
    pub out: PathBuf,
}

pub async fn batch(global: &Global, args: BatchArgs) -> Result<()> {
    let engine = build_engine(global, Some(&args.out))?;
    let queries = load_query_rows(&args.queries)?;
    let gold = args.gold.as_deref().map(load_gold).transpose()?;

    let report = engine
        .batch(&queries, gold.as_ref(), args.baseline, global.concurrency)
        .await;

    let mut inputs = vec![args.queries.clone()];
    if let Some(gold_path) = &args.gold {
        inputs.push(gold_path.clone());
    }
    if let Some(cascade_cfg) = &global.config.cascade {
        inputs.push(cascade_cfg.references_path.clone());
    }
    write_report(
        &args.out,
        &report,
        global.seed,
        global.config_path.as_deref(),
        &inputs,
    )?;

    println!(
        "cascade: {} queries, routed {} ({:.2}), expensive tokens {}{} -> {}",
        report.total_queries,
        report.routed_count,
        report.routed_fraction,
        report.expensive_api_tokens,
        report
            .relative_api_tokens
            .map(|r| format!(
                ", relative {:.3}{}",
                r,
                if report.relative_api_tokens_estimated {
                    " (estimated)"
                } else {
                    ""
                }
            ))
            .unwrap_or_default(),
        args.out.display()
    );
    if !report.failures.is_empty() {
        println!(
            "cascade: {} queries failed; see report",
            report.failures.len()
        );
    }
    Ok(())
}
