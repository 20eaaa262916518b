//! `mrank filter`: iterative instruction-data filtering between
//! externally run fine-tuning epochs.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use serde::Serialize;

use mrank_core::curation::{
    load_instruction_dataset, run_filter_schedule, FilterError, FilterReport, InstructionSample,
    ScheduleOptions,
};

use crate::manifest::write_report;

use super::{build_judge, Global, JudgeSpec};

pub struct FilterArgs {
    pub train: PathBuf,
    pub epochs: usize,
    pub refs: usize,
    pub seed: Option<u64>,
    pub model_endpoint: String,
    pub resample: bool,
    pub max_tokens: u32,
    pub out: PathBuf,
}

#[derive(Serialize)]
struct FilterSummary<'a> {
    epochs_completed: usize,
    initial_count: usize,
    kept_count: usize,
    filtered_count: usize,
    overall_kept_fraction: f64,
    aborted_empty: bool,
    reports: &'a [FilterReport],
}

fn write_jsonl(path: &Path, samples: &[&InstructionSample]) -> Result<()> {
    let mut file = std::fs::File::create(path)
        .with_context(|| format!("failed to create {}", path.display()))?;
    for sample in samples {
        writeln!(file, "{}", serde_json::to_string(sample)?)?;
    }
    Ok(())
}

pub async fn run(global: &Global, args: FilterArgs) -> Result<()> {
    let train = load_instruction_dataset(&args.train)?;
    let endpoint = global.config.endpoint(&args.model_endpoint)?;
    let client = global.client(Some(&args.out.join("filter_report.json")))?;
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
            default_template: "instruction-quality",
        },
    )?;
    let vote = global.config.vote_config(None, None)?;
    let seed = args.seed.unwrap_or(global.seed);

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("failed to create {}", args.out.display()))?;

    let options = ScheduleOptions {
        epochs: args.epochs,
        reference_count: args.refs,
        seed,
        resample: args.resample,
        max_tokens: args.max_tokens,
        concurrency: global.concurrency,
    };
    let schedule =
        run_filter_schedule(&train, &endpoint, &client, &vote, judge.as_ref(), options).await;

    let (reports, kept_ids, aborted) = match &schedule {
        Ok(outcome) => (
            outcome.reports.as_slice(),
            outcome
                .kept
                .iter()
                .map(|s| s.id.clone())
                .collect::<HashSet<_>>(),
            false,
        ),
        Err(FilterError::EmptySurvivors { reports, .. }) => {
            (reports.as_slice(), HashSet::new(), true)
        }
        Err(e) => return Err(anyhow!(e.to_string())),
    };

    let kept: Vec<&InstructionSample> = train.iter().filter(|s| kept_ids.contains(&s.id)).collect();
    let filtered: Vec<&InstructionSample> =
        train.iter().filter(|s| !kept_ids.contains(&s.id)).collect();

    let summary = FilterSummary {
        epochs_completed: reports.len(),
        initial_count: train.len(),
        kept_count: kept.len(),
        filtered_count: filtered.len(),
        overall_kept_fraction: if train.is_empty() {
            0.0
        } else {
            kept.len() as f64 / train.len() as f64
        },
        aborted_empty: aborted,
        reports,
    };

    let report_path = args.out.join("filter_report.json");
    write_jsonl(&args.out.join("kept.jsonl"), &kept)?;
    write_jsonl(&args.out.join("filtered.jsonl"), &filtered)?;
    write_report(
        &report_path,
        &summary,
        seed,
        global.config_path.as_deref(),
        std::slice::from_ref(&args.train),
    )?;

    println!(
        "filter: {} epochs, kept {}/{} ({:.3}) -> {}",
        summary.epochs_completed,
        summary.kept_count,
        summary.initial_count,
        summary.overall_kept_fraction,
        args.out.display()
    );
    if aborted {
        return Err(anyhow!(
            "filtering aborted: an epoch filtered every remaining sample (partial reports written)"
        ));
    }
    Ok(())
}
