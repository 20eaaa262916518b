//! Signed voting over cross-query comparison outcomes.
//!
//! A target query-response pair is compared against each scored reference
//! pair; every comparison outcome is turned into a signed vote
//! `s_i = S_i * delta[sgn(S_i) * r_i]` and the target is judged reliable
//! when the vote total is non-negative. The total is permutation-agnostic
//! towards references and linear in the reference scores, so continuous
//! scores work without modification.

use serde::{Deserialize, Serialize, Serializer};

use crate::compare::{Comparator, ComparatorError};
use crate::pair::{InputError, QueryResponsePair, ReferenceSet};

/// Result of one cross-query comparison: is the target pair better than,
/// equal to, or worse than the reference pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ComparisonOutcome {
    TargetBetter,
    Tie,
    TargetWorse,
}

impl ComparisonOutcome {
    /// Numeric value: +1 better, 0 tie, -1 worse.
    pub fn value(self) -> i8 {
        match self {
            ComparisonOutcome::TargetBetter => 1,
            ComparisonOutcome::Tie => 0,
            ComparisonOutcome::TargetWorse => -1,
        }
    }

    /// Outcome from the sign of a real number.
    pub fn from_sign(x: f64) -> Self {
        if x > 0.0 {
            ComparisonOutcome::TargetBetter
        } else if x < 0.0 {
            ComparisonOutcome::TargetWorse
        } else {
            ComparisonOutcome::Tie
        }
    }

    /// The outcome seen from the other side of the comparison.
    pub fn flipped(self) -> Self {
        match self {
            ComparisonOutcome::TargetBetter => ComparisonOutcome::TargetWorse,
            ComparisonOutcome::Tie => ComparisonOutcome::Tie,
            ComparisonOutcome::TargetWorse => ComparisonOutcome::TargetBetter,
        }
    }
}

impl Serialize for ComparisonOutcome {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_i8(self.value())
    }
}

impl<'de> Deserialize<'de> for ComparisonOutcome {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = i8::deserialize(deserializer)?;
        match v {
            1 => Ok(ComparisonOutcome::TargetBetter),
            0 => Ok(ComparisonOutcome::Tie),
            -1 => Ok(ComparisonOutcome::TargetWorse),
            other => Err(serde::de::Error::custom(format!(
                "comparison outcome must be +1, 0 or -1, got {other}"
            ))),
        }
    }
}

/// Sign of a real number as an integer in {-1, 0, +1}.
pub fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Vote magnitudes selected by `sgn(S_i) * r_i`. Requires
/// `delta_plus > 0` and `delta_minus < 0`; `delta_zero` is unconstrained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VoteConfig {
    delta_plus: f64,
    delta_zero: f64,
    delta_minus: f64,
}

impl VoteConfig {
    pub fn new(delta_plus: f64, delta_zero: f64, delta_minus: f64) -> Result<Self, InputError> {
        if !(delta_plus.is_finite() && delta_zero.is_finite() && delta_minus.is_finite())
            || delta_plus <= 0.0
            || delta_minus >= 0.0
        {
            return Err(InputError::InvalidDeltas {
                plus: delta_plus,
                minus: delta_minus,
            });
        }
        Ok(Self {
            delta_plus,
            delta_zero,
            delta_minus,
        })
    }

    /// English multiple-choice setting: (1, 1, -0.5).
    pub fn mmlu() -> Self {
        Self {
            delta_plus: 1.0,
            delta_zero: 1.0,
            delta_minus: -0.5,
        }
    }

    /// Chinese multiple-choice setting: (1, 0.5, -0.25).
    pub fn cmmlu() -> Self {
        Self {
            delta_plus: 1.0,
            delta_zero: 0.5,
            delta_minus: -0.25,
        }
    }

    /// Translation setting: (1, 0, -1).
    pub fn translation() -> Self {
        Self {
            delta_plus: 1.0,
            delta_zero: 0.0,
            delta_minus: -1.0,
        }
    }

    /// Instruction-data filtering setting: (1, 0, -1).
    pub fn instruct() -> Self {
        Self::translation()
    }

    /// Look up a named preset.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "mmlu" => Some(Self::mmlu()),
            "cmmlu" => Some(Self::cmmlu()),
            "translation" => Some(Self::translation()),
            "instruct" => Some(Self::instruct()),
            _ => None,
        }
    }

    pub const PRESET_NAMES: &'static [&'static str] = &["mmlu", "cmmlu", "translation", "instruct"];

    pub fn delta_plus(&self) -> f64 {
        self.delta_plus
    }

    pub fn delta_zero(&self) -> f64 {
        self.delta_zero
    }

    pub fn delta_minus(&self) -> f64 {
        self.delta_minus
    }

    /// The delta selected by an index in {-1, 0, +1}.
    fn delta(&self, index: i8) -> f64 {
        match index {
            1 => self.delta_plus,
            -1 => self.delta_minus,
            _ => self.delta_zero,
        }
    }
}

impl Default for VoteConfig {
    /// (1, 0, -1) unless a task preset is chosen.
    fn default() -> Self {
        Self::translation()
    }
}

/// The full outcome of judging one target pair: per-reference comparison
/// outcomes, per-reference votes, the total, and the verdict.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetaRankDecision {
    pub outcomes: Vec<ComparisonOutcome>,
    pub votes: Vec<f64>,
    pub total: f64,
    /// True iff `total >= 0`. A zero total is judged reliable.
    pub reliable: bool,
    /// Sign of the total: the estimated reliability sign of the target.
    pub estimated_sign: i8,
    /// Degenerate case: every reference score was zero, so the total is
    /// identically zero and the verdict carries no information.
    pub all_zero_scores: bool,
}

/// Judgment failure: the comparator failed on one reference.
#[derive(Debug, thiserror::Error)]
#[error("comparator failed on reference {index}{}: {source}", id.as_deref().map(|i| format!(" ({i})")).unwrap_or_default())]
pub struct JudgeError {
    /// Zero-based position of the failed reference.
    pub index: usize,
    /// Identifier of the failed reference, when it has one.
    pub id: Option<String>,
    #[source]
    pub source: ComparatorError,
}

/// Individual voting value for one reference:
/// `s_i = S_i * delta[sgn(S_i) * r_i]`.
///
/// A zero score contributes zero for every outcome.
pub fn vote_value(
    score: f64,
    outcome: ComparisonOutcome,
    cfg: &VoteConfig,
) -> Result<f64, InputError> {
    if !score.is_finite() {
        return Err(InputError::NonFiniteScore(score));
    }
    let index = sign(score) * outcome.value();
    Ok(score * cfg.delta(index))
}

/// Total vote value: the sum, order-independent.
///
/// Summation happens in a canonical order, so no permutation of the
/// inputs can change the floating-point result.
pub fn aggregate(votes: &[f64]) -> Result<f64, InputError> {
    if votes.is_empty() {
        return Err(InputError::EmptyVotes);
    }
    if votes.iter().any(|v| !v.is_finite()) {
        return Err(InputError::NonFiniteVote);
    }
    let mut canonical = votes.to_vec();
    canonical.sort_by(f64::total_cmp);
    Ok(canonical.iter().sum())
}

/// Build a decision from reference scores and already-obtained comparison
/// outcomes. This is the pure tail of [`meta_rank`], split out so callers
/// that gather outcomes themselves (or tests) can reuse it.
pub fn decide(
    refs: &ReferenceSet,
    outcomes: Vec<ComparisonOutcome>,
    cfg: &VoteConfig,
) -> Result<MetaRankDecision, InputError> {
    if outcomes.len() != refs.len() {
        return Err(InputError::Invalid(format!(
            "expected {} outcomes, got {}",
            refs.len(),
            outcomes.len()
        )));
    }
    let votes = refs
        .iter()
        .zip(&outcomes)
        .map(|(r, &o)| vote_value(r.score(), o, cfg))
        .collect::<Result<Vec<f64>, _>>()?;
    let total = aggregate(&votes)?;
    Ok(MetaRankDecision {
        outcomes,
        votes,
        total,
        // Exact IEEE comparison: the deltas are user-chosen constants and
        // the decision threshold is fixed at 0.
        reliable: total >= 0.0,
        estimated_sign: sign(total),
        all_zero_scores: refs.all_scores_zero(),
    })
}

/// Judge a target pair against every reference.
///
/// All N comparisons run even when the running total's sign is already
/// determined, so identical inputs always produce identical comparator
/// call sequences for auditing. Comparator failure on any reference
/// aborts the judgment and names the reference.
pub async fn meta_rank(
    target: &QueryResponsePair,
    refs: &ReferenceSet,
    cfg: &VoteConfig,
    comparator: &dyn Comparator,
) -> Result<MetaRankDecision, JudgeError> {
    let mut outcomes = Vec::with_capacity(refs.len());
    for (index, reference) in refs.iter().enumerate() {
        let outcome = comparator
            .compare(target, reference)
            .await
            .map_err(|source| JudgeError {
                index,
                id: reference.id().map(str::to_owned),
                source,
            })?;
        outcomes.push(outcome);
    }
    decide(refs, outcomes, cfg).map_err(|e| JudgeError {
        index: 0,
        id: None,
        source: ComparatorError::Invalid(e.to_string()),
    })
}
