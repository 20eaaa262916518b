//! Iterative instruction-data filtering.
//!
//! Each epoch samples a handful of training queries, asks the current
//! model to answer them, treats those answers as all-positive references
//! (score 1), and keeps a training sample only when the judge ranks it at
//! least as well as the references. Filtering runs between externally
//! managed fine-tuning epochs; nothing here trains a model.

use std::collections::HashSet;

use futures::stream::{self, StreamExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ChatClient, ChatRequest, EndpointConfig};
use crate::compare::Comparator;
use crate::pair::{QueryResponsePair, ReferenceSet, ScoredReference};
use crate::rank::{meta_rank, ComparisonOutcome, VoteConfig};

#[derive(Debug, Error)]
pub enum FilterError {
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
    #[error("reference sample count {requested} exceeds available {available}")]
    NotEnoughSamples { requested: usize, available: usize },
    #[error("reference sample count must be at least 1")]
    ZeroReferences,
    #[error("no reference responses survived generation")]
    NoReferences,
    #[error("epoch {epoch} filtered every remaining sample")]
    EmptySurvivors {
        epoch: usize,
        reports: Vec<FilterReport>,
    },
    #[error("{0}")]
    Input(String),
}

/// One instruction-tuning sample: instruction, optional input, output.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructionSample {
    pub id: String,
    pub instruction: String,
    #[serde(default)]
    pub input: String,
    pub output: String,
}

/// Load a JSON Lines instruction dataset.
pub fn load_instruction_dataset(
    path: impl AsRef<std::path::Path>,
) -> Result<Vec<InstructionSample>, FilterError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| FilterError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let load_err = |message: String| FilterError::Load {
            path: path.display().to_string(),
            line: idx + 1,
            message,
        };
        let sample: InstructionSample =
            serde_json::from_str(line).map_err(|e| load_err(e.to_string()))?;
        if sample.instruction.is_empty() {
            return Err(load_err(format!(
                "sample {}: instruction must be non-empty",
                sample.id
            )));
        }
        if !seen.insert(sample.id.clone()) {
            return Err(load_err(format!("duplicate sample id {:?}", sample.id)));
        }
        samples.push(sample);
    }
    Ok(samples)
}

/// The query text a sample contributes: instruction, then the input on a
/// new line when present.
pub fn sample_query(sample: &InstructionSample) -> String {
    if sample.input.is_empty() {
        sample.instruction.clone()
    } else {
        format!("{}\n{}", sample.instruction, sample.input)
    }
}

/// The judging target for a sample: its query text against its output.
pub fn target_pair(sample: &InstructionSample) -> Result<QueryResponsePair, FilterError> {
    Ok(
        QueryResponsePair::new(sample_query(sample), sample.output.clone())
            .map_err(|e| FilterError::Input(format!("sample {}: {e}", sample.id)))?
            .with_id(sample.id.clone()),
    )
}

/// Uniform sample of reference queries without replacement, deterministic
/// by seed.
pub fn sample_reference_queries(
    train: &[InstructionSample],
    count: usize,
    seed: u64,
) -> Result<Vec<InstructionSample>, FilterError> {
    if count == 0 {
        return Err(FilterError::ZeroReferences);
    }
    if count > train.len() {
        return Err(FilterError::NotEnoughSamples {
            requested: count,
            available: train.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, train.len(), count);
    Ok(picked.iter().map(|i| train[i].clone()).collect())
}

/// Generate the current model's response to each reference query and score
/// every resulting reference pair 1. Queries whose generation fails are
/// skipped with a warning; at least one must survive.
pub async fn build_epoch_references(
    queries: &[InstructionSample],
    endpoint: &EndpointConfig,
    client: &ChatClient,
    max_tokens: u32,
) -> Result<ReferenceSet, FilterError> {
    let mut references = Vec::with_capacity(queries.len());
    for sample in queries {
        let query = sample_query(sample);
        let request = ChatRequest::deterministic(query.clone(), max_tokens)
            .map_err(|e| FilterError::Input(e.to_string()))?;
        match client.chat_complete(endpoint, &request).await {
            Ok(completion) => {
                let pair = QueryResponsePair::new(query, completion.text)
                    .map_err(|e| FilterError::Input(e.to_string()))?
                    .with_id(sample.id.clone());
                references.push(
                    ScoredReference::new(pair, 1.0)
                        .map_err(|e| FilterError::Input(e.to_string()))?,
                );
            }
            Err(e) => {
                tracing::warn!(id = %sample.id, error = %e, "reference generation failed, skipping query");
            }
        }
    }
    if references.len() < queries.len() && !references.is_empty() {
        tracing::warn!(
            surviving = references.len(),
            requested = queries.len(),
            "continuing with a reduced reference set"
        );
    }
    ReferenceSet::new(references).map_err(|_| FilterError::NoReferences)
}

/// Per-sample judgment summary within one epoch.
#[derive(Debug, Clone, Serialize)]
pub struct SampleDecision {
    pub id: String,
    pub kept: bool,
    pub total: f64,
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
    /// Judgment failed; the sample was kept rather than discarded on an
    /// infrastructure error.
    pub unjudged: bool,
}

/// The outcome of one filtering epoch. Kept and filtered ids partition the
/// epoch's input set.
#[derive(Debug, Clone, Serialize)]
pub struct FilterReport {
    pub epoch: usize,
    pub reference_ids: Vec<String>,
    pub kept_ids: Vec<String>,
    pub filtered_ids: Vec<String>,
    pub unjudged_ids: Vec<String>,
    pub kept_fraction: f64,
    pub decisions: Vec<SampleDecision>,
}

fn count_outcomes(outcomes: &[ComparisonOutcome]) -> (usize, usize, usize) {
    let mut wins = 0;
    let mut ties = 0;
    let mut losses = 0;
    for o in outcomes {
        match o {
            ComparisonOutcome::TargetBetter => wins += 1,
            ComparisonOutcome::Tie => ties += 1,
            ComparisonOutcome::TargetWorse => losses += 1,
        }
    }
    (wins, ties, losses)
}

/// Judge every sample against the epoch's references; keep the reliable
/// ones. With all-ones reference scores and the (1, 0, -1) deltas the
/// total is wins minus losses, so kept means wins >= losses.
pub async fn filter_epoch(
    train: &[InstructionSample],
    refs: &ReferenceSet,
    cfg: &VoteConfig,
    comparator: &dyn Comparator,
    epoch: usize,
    concurrency: usize,
) -> Result<FilterReport, FilterError> {
    let concurrency = concurrency.max(1);
    let targets = train
        .iter()
        .map(|s| Ok((s.id.clone(), target_pair(s)?)))
        .collect::<Result<Vec<_>, FilterError>>()?;

    let judged = stream::iter(targets.into_iter().map(|(id, pair)| async move {
        let result = meta_rank(&pair, refs, cfg, comparator).await;
        (id, result)
    }))
    .buffered(concurrency)
    .collect::<Vec<_>>()
    .await;

    let mut report = FilterReport {
        epoch,
        reference_ids: refs
            .iter()
            .filter_map(|r| r.id().map(str::to_owned))
            .collect(),
        kept_ids: Vec::new(),
        filtered_ids: Vec::new(),
        unjudged_ids: Vec::new(),
        kept_fraction: 0.0,
        decisions: Vec::new(),
    };
    for (id, result) in judged {
        match result {
            Ok(decision) => {
                let (wins, ties, losses) = count_outcomes(&decision.outcomes);
                if decision.reliable {
                    report.kept_ids.push(id.clone());
                } else {
                    report.filtered_ids.push(id.clone());
                }
                report.decisions.push(SampleDecision {
                    id,
                    kept: decision.reliable,
                    total: decision.total,
                    wins,
                    ties,
                    losses,
                    unjudged: false,
                });
            }
            Err(e) => {
                tracing::warn!(id = %id, error = %e, "judgment failed; keeping sample unjudged");
                report.kept_ids.push(id.clone());
                report.unjudged_ids.push(id.clone());
                report.decisions.push(SampleDecision {
                    id,
                    kept: true,
                    total: 0.0,
                    wins: 0,
                    ties: 0,
                    losses: 0,
                    unjudged: true,
                });
            }
        }
    }
    report.kept_fraction = if train.is_empty() {
        0.0
    } else {
        report.kept_ids.len() as f64 / train.len() as f64
    };
    Ok(report)
}

/// Options for the epoch loop.
#[derive(Debug, Clone, Copy)]
pub struct ScheduleOptions {
    pub epochs: usize,
    pub reference_count: usize,
    pub seed: u64,
    /// Draw fresh reference queries from the surviving set each epoch
    /// instead of regenerating responses for the same queries.
    pub resample: bool,
    pub max_tokens: u32,
    pub concurrency: usize,
}

/// Final partition after the full schedule.
#[derive(Debug, Serialize)]
pub struct ScheduleOutcome {
    pub reports: Vec<FilterReport>,
    /// Survivors of every epoch, in original order.
    pub kept: Vec<InstructionSample>,
    /// Union of all filtered samples across epochs.
    pub filtered_ids: Vec<String>,
}

/// Run `epochs` filtering passes, each over the previous epoch's
/// survivors with freshly generated reference responses. Endpoint callers
/// repoint the model between epochs when checkpoints advance; this loop
/// only judges.
pub async fn run_filter_schedule(
    train: &[InstructionSample],
    endpoint: &EndpointConfig,
    client: &ChatClient,
    cfg: &VoteConfig,
    comparator: &dyn Comparator,
    options: ScheduleOptions,
) -> Result<ScheduleOutcome, FilterError> {
    if options.epochs == 0 {
        return Err(FilterError::Input("epochs must be at least 1".into()));
    }
    let mut reference_queries =
        sample_reference_queries(train, options.reference_count, options.seed)?;
    let mut survivors: Vec<InstructionSample> = train.to_vec();
    let mut reports = Vec::with_capacity(options.epochs);
    let mut filtered_ids = Vec::new();

    for epoch in 1..=options.epochs {
        if options.resample && epoch > 1 {
            reference_queries = sample_reference_queries(
                &survivors,
                options.reference_count.min(survivors.len()),
                options.seed.wrapping_add(epoch as u64),
            )?;
        }
        let refs = build_epoch_references(&reference_queries, endpoint, client, options.max_tokens)
            .await?;
        let report = filter_epoch(
            &survivors,
            &refs,
            cfg,
            comparator,
            epoch,
            options.concurrency,
        )
        .await?;

        let kept: HashSet<&str> = report.kept_ids.iter().map(String::as_str).collect();
        survivors.retain(|s| kept.contains(s.id.as_str()));
        filtered_ids.extend(report.filtered_ids.iter().cloned());
        reports.push(report);

        if survivors.is_empty() {
            return Err(FilterError::EmptySurvivors { epoch, reports });
        }
    }

    Ok(ScheduleOutcome {
        reports,
        kept: survivors,
        filtered_ids,
    })
}
