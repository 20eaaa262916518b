//! Error detection over multiple-choice responses: build references from
//! a dev split, judge each test response, and report micro
//! precision/recall/F1 with "incorrect" as the positive class.

use std::collections::HashMap;
use std::sync::LazyLock;
use std::time::Instant;

use futures::stream::{self, StreamExt};
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::compare::Comparator;
use crate::pair::{QueryResponsePair, ReferenceSet, ScoredReference};
use crate::rank::{meta_rank, VoteConfig};

#[derive(Debug, Error)]
pub enum DetectError {
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
    #[error("{0}")]
    Input(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Dev,
    Test,
}

/// One multiple-choice item. Choice labels are single letters; the map is
/// ordered so prompts render deterministically.
#[derive(Debug, Clone, Serialize)]
pub struct MultipleChoiceItem {
    pub id: String,
    pub question: String,
    pub choices: BTreeMap<String, String>,
    pub gold: String,
    pub subject: Option<String>,
    pub split: Split,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawItem {
    id: String,
    question: String,
    choices: BTreeMap<String, String>,
    gold: String,
    #[serde(default)]
    subject: Option<String>,
    split: Split,
}

impl MultipleChoiceItem {
    fn from_raw(raw: RawItem) -> Result<Self, String> {
        if raw.choices.len() < 2 {
            return Err(format!("item {} needs at least 2 choices", raw.id));
        }
        if !raw.choices.contains_key(&raw.gold) {
            return Err(format!(
                "item {}: gold label {:?} is not among the choices",
                raw.id, raw.gold
            ));
        }
        if raw.question.is_empty() {
            return Err(format!("item {}: question must be non-empty", raw.id));
        }
        Ok(Self {
            id: raw.id,
            question: raw.question,
            choices: raw.choices,
            gold: raw.gold,
            subject: raw.subject,
            split: raw.split,
        })
    }
}

/// Load a JSON Lines dataset of multiple-choice items. An empty file is an
/// empty dataset, not an error; a malformed row names its line.
pub fn load_mc_dataset(
    path: impl AsRef<std::path::Path>,
) -> Result<Vec<MultipleChoiceItem>, DetectError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DetectError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut items = Vec::new();
    let mut seen = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let load_err = |message: String| DetectError::Load {
            path: path.display().to_string(),
            line: idx + 1,
            message,
        };
        let raw: RawItem = serde_json::from_str(line).map_err(|e| load_err(e.to_string()))?;
        if let Some(prev) = seen.insert(raw.id.clone(), idx + 1) {
            return Err(load_err(format!(
                "duplicate item id {:?} (first seen on line {prev})",
                raw.id
            )));
        }
        items.push(MultipleChoiceItem::from_raw(raw).map_err(load_err)?);
    }
    Ok(items)
}

/// Load JSON Lines responses `{"id", "response"}` keyed by item id.
pub fn load_responses(
    path: impl AsRef<std::path::Path>,
) -> Result<HashMap<String, String>, DetectError> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Row {
        id: String,
        response: String,
    }
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DetectError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut map = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Row = serde_json::from_str(line).map_err(|e| DetectError::Load {
            path: path.display().to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        if map.insert(row.id.clone(), row.response).is_some() {
            return Err(DetectError::Load {
                path: path.display().to_string(),
                line: idx + 1,
                message: format!("duplicate response for id {:?}", row.id),
            });
        }
    }
    Ok(map)
}

/// Render the full instruction fed to models and judges: question, one
/// line per choice, and the step-by-step closing line.
pub fn render_mc_prompt(item: &MultipleChoiceItem) -> String {
    let mut out = String::with_capacity(item.question.len() + 64);
    out.push_str(&item.question);
    for (label, text) in &item.choices {
        out.push('\n');
        out.push_str(label);
        out.push_str(". ");
        out.push_str(text);
    }
    out.push_str("\nPlease think step by step and give the answer.");
    out
}

/// A response graded against its item's gold label.
#[derive(Debug, Clone, Serialize)]
pub struct GradedResponse {
    pub item_id: String,
    pub response_text: String,
    pub extracted_choice: Option<String>,
    pub correct: bool,
    /// +1 when correct, -1 otherwise.
    pub score: f64,
}

static CHOICE_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\(([A-Z])\)|\b([A-Z])\b").expect("valid regex"));

/// Extract the final choice letter from a response: `(X)` or a standalone
/// `X` accepted by `is_label`, last occurrence wins.
pub fn extract_choice(response_text: &str, is_label: impl Fn(&str) -> bool) -> Option<String> {
    let mut extracted = None;
    for caps in CHOICE_RE.captures_iter(response_text) {
        let letter = caps
            .get(1)
            .or_else(|| caps.get(2))
            .map(|m| m.as_str())
            .unwrap_or_default();
        if is_label(letter) {
            extracted = Some(letter.to_string());
        }
    }
    extracted
}

/// Grade by extracting the final standalone choice letter among the
/// item's labels. No extractable choice grades as incorrect.
pub fn grade_response(response_text: &str, item: &MultipleChoiceItem) -> GradedResponse {
    let extracted = extract_choice(response_text, |l| item.choices.contains_key(l));
    let correct = extracted.as_deref() == Some(item.gold.as_str());
    GradedResponse {
        item_id: item.id.clone(),
        response_text: response_text.to_string(),
        extracted_choice: extracted,
        correct,
        score: if correct { 1.0 } else { -1.0 },
    }
}

/// Build the reference set from dev items and their model responses:
/// pair = (rendered instruction, response), score = graded ±1, in item
/// order. `num_refs` truncates to the first k when set.
pub fn build_references(
    dev_items: &[MultipleChoiceItem],
    responses: &HashMap<String, String>,
    num_refs: Option<usize>,
) -> Result<ReferenceSet, DetectError> {
    if dev_items.is_empty() {
        return Err(DetectError::Input(
            "reference building needs at least one dev item".into(),
        ));
    }
    let mut references = Vec::with_capacity(dev_items.len());
    for item in dev_items {
        let response = responses
            .get(&item.id)
            .ok_or_else(|| DetectError::Input(format!("no response for dev item {:?}", item.id)))?;
        let graded = grade_response(response, item);
        let pair = QueryResponsePair::new(render_mc_prompt(item), response.clone())
            .map_err(|e| DetectError::Input(e.to_string()))?
            .with_id(item.id.clone());
        references.push(
            ScoredReference::new(pair, graded.score)
                .map_err(|e| DetectError::Input(e.to_string()))?,
        );
    }
    let set = ReferenceSet::new(references).map_err(|e| DetectError::Input(e.to_string()))?;
    match num_refs {
        Some(k) => set
            .truncate(k)
            .map_err(|e| DetectError::Input(e.to_string())),
        None => Ok(set),
    }
}

/// Confusion counts with "incorrect response" as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    /// Flagged incorrect, actually incorrect.
    pub tp: u64,
    /// Flagged incorrect, actually correct.
    pub fp: u64,
    /// Not flagged, actually incorrect.
    pub fn_: u64,
    /// Not flagged, actually correct.
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MicroMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when a zero denominator forced the corresponding metric to 0.
    pub degenerate_precision: bool,
    pub degenerate_recall: bool,
}

/// Micro precision/recall/F1 from pooled counts. Zero denominators yield
/// 0 with the degenerate flag set.
pub fn micro_metrics(confusion: &Confusion) -> MicroMetrics {
    let tp = confusion.tp as f64;
    let flagged = confusion.tp + confusion.fp;
    let actual = confusion.tp + confusion.fn_;
    let (precision, degenerate_precision) = if flagged > 0 {
        (tp / flagged as f64, false)
    } else {
        (0.0, true)
    };
    let (recall, degenerate_recall) = if actual > 0 {
        (tp / actual as f64, false)
    } else {
        (0.0, true)
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    MicroMetrics {
        precision,
        recall,
        f1,
        degenerate_precision,
        degenerate_recall,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ItemVerdict {
    pub id: String,
    pub flagged_incorrect: bool,
    pub actually_incorrect: bool,
    pub extracted_choice: Option<String>,
    pub vote_total: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SkippedItem {
    pub id: String,
    pub reason: String,
}

/// The detection run's full output.
#[derive(Debug, Serialize)]
pub struct DetectionReport {
    pub verdicts: Vec<ItemVerdict>,
    pub skipped: Vec<SkippedItem>,
    pub confusion: Confusion,
    pub metrics: MicroMetrics,
    pub judged_count: usize,
    pub comparator_call_count: u64,
    pub wall_time_secs: f64,
}

/// Judge every test item and pool the confusion counts. Items whose
/// judgment fails are skipped and excluded from the metrics rather than
/// defaulted. Items run with bounded concurrency; output order is input
/// order.
pub async fn detect_errors(
    test_items: &[MultipleChoiceItem],
    responses: &HashMap<String, String>,
    refs: &ReferenceSet,
    cfg: &VoteConfig,
    comparator: &dyn Comparator,
    concurrency: usize,
) -> Result<DetectionReport, DetectError> {
    let started = Instant::now();
    let concurrency = concurrency.max(1);

    let mut targets = Vec::with_capacity(test_items.len());
    for item in test_items {
        let response = responses.get(&item.id).ok_or_else(|| {
            DetectError::Input(format!("no response for test item {:?}", item.id))
        })?;
        let graded = grade_response(response, item);
        let pair = QueryResponsePair::new(render_mc_prompt(item), response.clone())
            .map_err(|e| DetectError::Input(e.to_string()))?
            .with_id(item.id.clone());
        targets.push((item.id.clone(), pair, graded));
    }

    let n_refs = refs.len() as u64;
    let outcomes = stream::iter(targets.into_iter().map(|(id, pair, graded)| async move {
        let result = meta_rank(&pair, refs, cfg, comparator).await;
        (id, graded, result)
    }))
    .buffered(concurrency)
    .collect::<Vec<_>>()
    .await;

    let mut report = DetectionReport {
        verdicts: Vec::new(),
        skipped: Vec::new(),
        confusion: Confusion::default(),
        metrics: micro_metrics(&Confusion::default()),
        judged_count: 0,
        comparator_call_count: 0,
        wall_time_secs: 0.0,
    };
    for (id, graded, result) in outcomes {
        match result {
            Ok(decision) => {
                report.comparator_call_count += n_refs;
                report.judged_count += 1;
                let flagged = !decision.reliable;
                let actually_incorrect = !graded.correct;
                match (flagged, actually_incorrect) {
                    (true, true) => report.confusion.tp += 1,
                    (true, false) => report.confusion.fp += 1,
                    (false, true) => report.confusion.fn_ += 1,
                    (false, false) => report.confusion.tn += 1,
                }
                report.verdicts.push(ItemVerdict {
                    id,
                    flagged_incorrect: flagged,
                    actually_incorrect,
                    extracted_choice: graded.extracted_choice,
                    vote_total: decision.total,
                });
            }
            Err(e) => {
                // e.index comparisons were issued before the failing one.
                report.comparator_call_count += e.index as u64 + 1;
                report.skipped.push(SkippedItem {
                    id,
                    reason: e.to_string(),
                });
            }
        }
    }
    report.metrics = micro_metrics(&report.confusion);
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn item(id: &str, gold: &str, split: Split) -> MultipleChoiceItem {
        let choices = BTreeMap::from([
            ("A".to_string(), "alpha".to_string()),
            ("B".to_string(), "beta".to_string()),
            ("C".to_string(), "gamma".to_string()),
            ("D".to_string(), "delta".to_string()),
        ]);
        MultipleChoiceItem {
            id: id.to_string(),
            question: format!("Question {id}?"),
            choices,
            gold: gold.to_string(),
            subject: None,
            split,
        }
    }

    #[test]
    fn grading_extracts_last_choice() {
        let it = item("x", "B", Split::Test);
        let g = grade_response("…the answer is (B).", &it);
        assert_eq!(g.extracted_choice.as_deref(), Some("B"));
        assert!(g.correct);
        assert_eq!(g.score, 1.0);

        let g = grade_response("Therefore, the answer is C.", &it);
        assert_eq!(g.extracted_choice.as_deref(), Some("C"));
        assert!(!g.correct);
        assert_eq!(g.score, -1.0);

        let g = grade_response("I am unsure.", &it);
        assert_eq!(g.extracted_choice, None);
        assert!(!g.correct);
    }

    #[test]
    fn grading_last_occurrence_wins() {
        let it = item("x", "D", Split::Test);
        let g = grade_response("Maybe A. On reflection the answer is (D)", &it);
        assert_eq!(g.extracted_choice.as_deref(), Some("D"));
        assert!(g.correct);
    }

    #[test]
    fn grading_ignores_invalid_letters() {
        let it = item("x", "A", Split::Test);
        // "I" and "X" are standalone capitals but not valid labels.
        let g = grade_response("I think X marks the spot", &it);
        assert_eq!(g.extracted_choice, None);
    }

    #[test]
    fn prompt_renders_choices_in_label_order() {
        let it = item("x", "A", Split::Dev);
        let p = render_mc_prompt(&it);
        assert!(p.starts_with("Question x?\nA. alpha\nB. beta\nC. gamma\nD. delta"));
        assert!(p.ends_with("Please think step by step and give the answer."));
    }

    #[test]
    fn loader_reports_line_numbers() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(
            f,
            r#"{{"id":"a","question":"q","choices":{{"A":"1","B":"2"}},"gold":"A","split":"dev"}}"#
        )
        .unwrap();
        writeln!(
            f,
            r#"{{"id":"b","question":"q","choices":{{"A":"1","B":"2"}},"split":"dev"}}"#
        )
        .unwrap();
        let err = load_mc_dataset(f.path()).unwrap_err();
        match err {
            DetectError::Load { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn loader_accepts_empty_file() {
        let f = tempfile::NamedTempFile::new().unwrap();
        assert!(load_mc_dataset(f.path()).unwrap().is_empty());
    }

    #[test]
    fn loader_rejects_gold_outside_choices() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(
            f,
            r#"{{"id":"a","question":"q","choices":{{"A":"1","B":"2"}},"gold":"E","split":"dev"}}"#
        )
        .unwrap();
        assert!(load_mc_dataset(f.path()).is_err());
    }

    #[test]
    fn build_references_grades_in_item_order() {
        let dev: Vec<_> = [
            ("d1", "A"),
            ("d2", "B"),
            ("d3", "C"),
            ("d4", "D"),
            ("d5", "A"),
        ]
        .iter()
        .map(|(id, gold)| item(id, gold, Split::Dev))
        .collect();
        let responses = HashMap::from([
            ("d1".to_string(), "(A)".to_string()),
            ("d2".to_string(), "(B)".to_string()),
            ("d3".to_string(), "(C)".to_string()),
            ("d4".to_string(), "(A)".to_string()),
            ("d5".to_string(), "(B)".to_string()),
        ]);
        let refs = build_references(&dev, &responses, None).unwrap();
        assert_eq!(refs.scores(), vec![1.0, 1.0, 1.0, -1.0, -1.0]);

        let truncated = build_references(&dev, &responses, Some(1)).unwrap();
        assert_eq!(truncated.len(), 1);

        assert!(build_references(&[], &responses, None).is_err());
        assert!(build_references(&dev, &HashMap::new(), None).is_err());
    }

    #[test]
    fn micro_metrics_cases() {
        let m = micro_metrics(&Confusion {
            tp: 5,
            fp: 0,
            fn_: 0,
            tn: 5,
        });
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));

        let m = micro_metrics(&Confusion {
            tp: 0,
            fp: 0,
            fn_: 3,
            tn: 5,
        });
        assert_eq!(m.precision, 0.0);
        assert!(m.degenerate_precision);
        assert!(!m.degenerate_recall);

        let m = micro_metrics(&Confusion {
            tp: 3,
            fp: 1,
            fn_: 2,
            tn: 4,
        });
        assert_eq!(m.precision, 0.75);
        assert_eq!(m.recall, 0.6);
        assert!((m.f1 - 0.666_666_666_666_666_6).abs() < 1e-12);
    }
}
