//! `mrank detect`: judge test responses against dev-split references and
//! report micro precision/recall/F1 for incorrect-response detection.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Result};

use mrank_core::compare::{Comparator, OracleComparator, VerdictFormat};
use mrank_core::detect::{
    build_references, detect_errors, grade_response, load_mc_dataset, load_responses, Split,
};

use crate::config::ComparatorKind;
use crate::manifest::write_report;

use super::{build_judge, Global, JudgeSpec};

pub struct DetectArgs {
    pub dataset: PathBuf,
    pub responses: PathBuf,
    pub refs_split: Split,
    pub preset: Option<String>,
    pub explicit_deltas: Option<(f64, f64, f64)>,
    pub comparator: Option<ComparatorKind>,
    pub judge_endpoint: Option<String>,
    pub template: Option<String>,
    pub template_path: Option<PathBuf>,
    pub template_format: Option<VerdictFormat>,
    pub scores: Option<PathBuf>,
    pub tie_epsilon: Option<f64>,
    pub num_refs: Option<usize>,
    pub drop_zero_refs: bool,
    pub out: PathBuf,
}

pub async fn run(global: &Global, args: DetectArgs) -> Result<()> {
    let items = load_mc_dataset(&args.dataset)?;
    if items.is_empty() {
        bail!("dataset {} contains no items", args.dataset.display());
    }
    let responses = load_responses(&args.responses)?;

    let (ref_items, target_items): (Vec<_>, Vec<_>) = items
        .into_iter()
        .partition(|item| item.split == args.refs_split);
    if target_items.is_empty() {
        bail!("no items left to judge after taking the reference split");
    }

    let mut refs = build_references(&ref_items, &responses, args.num_refs)?;
    if args.drop_zero_refs {
        refs = refs.without_zero_scores().map_err(|e| anyhow::anyhow!(e))?;
    }
    let vote = global
        .config
        .vote_config(args.preset.as_deref(), args.explicit_deltas)?;

    let client = global.client(Some(&args.out))?;
    let kind = args.comparator.unwrap_or(global.config.comparator.kind);
    let comparator: Arc<dyn Comparator> = match kind {
        ComparatorKind::Oracle => {
            // Ground truth from grading each target response against gold.
            let truths: HashMap<String, f64> = target_items
                .iter()
                .map(|item| {
                    let response = responses.get(&item.id).map(String::as_str).unwrap_or("");
                    (item.id.clone(), grade_response(response, item).score)
                })
                .collect();
            Arc::new(OracleComparator::new(truths))
        }
        _ => build_judge(
            global,
            client,
            &JudgeSpec {
                kind: Some(kind),
                judge_endpoint: args.judge_endpoint.as_deref(),
                template: args.template.as_deref(),
                template_path: args.template_path.as_deref(),
                template_format: args.template_format,
                scores_path: args.scores.as_deref(),
                tie_epsilon: args.tie_epsilon,
                default_template: "correctness",
            },
        )?,
    };

    let report = detect_errors(
        &target_items,
        &responses,
        &refs,
        &vote,
        comparator.as_ref(),
        global.concurrency,
    )
    .await?;

    let mut inputs = vec![args.dataset.clone(), args.responses.clone()];
    if let Some(scores) = &args.scores {
        inputs.push(scores.clone());
    }
    if let Some(template) = &args.template_path {
        inputs.push(template.clone());
    }
    write_report(
        &args.out,
        &report,
        global.seed,
        global.config_path.as_deref(),
        &inputs,
    )?;

    println!(
        "detect: judged {} items ({} skipped), flagged {}, precision {:.4}, recall {:.4}, f1 {:.4} -> {}",
        report.judged_count,
        report.skipped.len(),
        report.confusion.tp + report.confusion.fp,
        report.metrics.precision,
        report.metrics.recall,
        report.metrics.f1,
        args.out.display()
    );
    if report.judged_count == 0 && !report.skipped.is_empty() {
        bail!(
            "every item was skipped on comparator failures; first: {}",
            report.skipped[0].reason
        );
    }
    Ok(())
}
