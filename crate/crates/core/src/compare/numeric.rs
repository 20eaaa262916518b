//! Score-based comparators: quality-estimation score comparison, the
//! ground-truth oracle, and a seeded noisy oracle for robustness tests.

use std::collections::HashMap;

use async_trait::async_trait;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::pair::{InputError, QueryResponsePair, ScoredReference};
use crate::rank::ComparisonOutcome;

use super::{Comparator, ComparatorError};

/// Two quality-estimation scores plus the tie band.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScorePair {
    pub target_score: f64,
    pub reference_score: f64,
    pub tie_epsilon: f64,
}

impl ScorePair {
    pub fn new(
        target_score: f64,
        reference_score: f64,
        tie_epsilon: f64,
    ) -> Result<Self, InputError> {
        if !target_score.is_finite() || !reference_score.is_finite() || !tie_epsilon.is_finite() {
            return Err(InputError::Invalid(
                "score comparison requires finite inputs".to_string(),
            ));
        }
        if tie_epsilon < 0.0 {
            return Err(InputError::Invalid(format!(
                "tie_epsilon must be >= 0, got {tie_epsilon}"
            )));
        }
        Ok(Self {
            target_score,
            reference_score,
            tie_epsilon,
        })
    }
}

/// Compare two scores with a tie band: within `tie_epsilon` is a tie,
/// otherwise the larger score wins.
pub fn score_compare(scores: &ScorePair) -> ComparisonOutcome {
    let diff = scores.target_score - scores.reference_score;
    if diff.abs() <= scores.tie_epsilon {
        ComparisonOutcome::Tie
    } else if diff > 0.0 {
        ComparisonOutcome::TargetBetter
    } else {
        ComparisonOutcome::TargetWorse
    }
}

/// Ground-truth comparison: the sign of `target_true_score - reference_score`.
pub fn oracle_compare(target_true_score: f64, reference_score: f64) -> ComparisonOutcome {
    ComparisonOutcome::from_sign(target_true_score - reference_score)
}

/// Oracle with seeded label noise: with probability `flip_probability` the
/// outcome is replaced by a uniformly random different outcome.
/// Deterministic given the seed.
pub fn noisy_oracle_compare(
    target_true_score: f64,
    reference_score: f64,
    flip_probability: f64,
    seed: u64,
) -> Result<ComparisonOutcome, InputError> {
    if !(0.0..=1.0).contains(&flip_probability) {
        return Err(InputError::Invalid(format!(
            "flip_probability must be in [0, 1], got {flip_probability}"
        )));
    }
    let truth = oracle_compare(target_true_score, reference_score);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if rng.gen::<f64>() >= flip_probability {
        return Ok(truth);
    }
    let others: Vec<ComparisonOutcome> = [
        ComparisonOutcome::TargetBetter,
        ComparisonOutcome::Tie,
        ComparisonOutcome::TargetWorse,
    ]
    .into_iter()
    .filter(|o| *o != truth)
    .collect();
    Ok(others[rng.gen_range(0..others.len())])
}

fn require_id<'a>(pair: &'a QueryResponsePair, what: &str) -> Result<&'a str, ComparatorError> {
    pair.id()
        .ok_or_else(|| ComparatorError::MissingId(what.to_string()))
}

/// Compares externally supplied per-pair quality scores, looked up by pair
/// id. Used for translation-style tasks where a quality-estimation model
/// scores each response out of band.
#[derive(Debug, Clone)]
pub struct ScoreComparator {
    scores: HashMap<String, f64>,
    tie_epsilon: f64,
}

impl ScoreComparator {
    pub fn new(scores: HashMap<String, f64>, tie_epsilon: f64) -> Result<Self, InputError> {
        if !tie_epsilon.is_finite() || tie_epsilon < 0.0 {
            return Err(InputError::Invalid(format!(
                "tie_epsilon must be a finite value >= 0, got {tie_epsilon}"
            )));
        }
        if let Some((id, s)) = scores.iter().find(|(_, s)| !s.is_finite()) {
            return Err(InputError::Invalid(format!(
                "score for pair {id} is not finite ({s})"
            )));
        }
        Ok(Self {
            scores,
            tie_epsilon,
        })
    }

    fn lookup(&self, id: &str) -> Result<f64, ComparatorError> {
        self.scores
            .get(id)
            .copied()
            .ok_or_else(|| ComparatorError::MissingScore(id.to_string()))
    }
}

#[async_trait]
impl Comparator for ScoreComparator {
    async fn compare(
        &self,
        target: &QueryResponsePair,
        reference: &ScoredReference,
    ) -> Result<ComparisonOutcome, ComparatorError> {
        let target_score = self.lookup(require_id(target, "target")?)?;
        let reference_score = self.lookup(require_id(reference.pair(), "reference")?)?;
        let pair = ScorePair::new(target_score, reference_score, self.tie_epsilon)
            .map_err(|e| ComparatorError::Invalid(e.to_string()))?;
        Ok(score_compare(&pair))
    }
}

/// Test oracle: compares the target's known true score (looked up by id)
/// against the reference's reliability score.
#[derive(Debug, Clone, Default)]
pub struct OracleComparator {
    truths: HashMap<String, f64>,
}

impl OracleComparator {
    pub fn new(truths: HashMap<String, f64>) -> Self {
        Self { truths }
    }

    fn truth(&self, id: &str) -> Result<f64, ComparatorError> {
        self.truths
            .get(id)
            .copied()
            .ok_or_else(|| ComparatorError::MissingScore(id.to_string()))
    }
}

#[async_trait]
impl Comparator for OracleComparator {
    async fn compare(
        &self,
        target: &QueryResponsePair,
        reference: &ScoredReference,
    ) -> Result<ComparisonOutcome, ComparatorError> {
        let truth = self.truth(require_id(target, "target")?)?;
        Ok(oracle_compare(truth, reference.score()))
    }
}

fn fnv1a64(parts: &[&[u8]]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for part in parts {
        for byte in part.iter().chain(std::iter::once(&0x1f)) {
            hash ^= u64::from(*byte);
            hash = hash.wrapping_mul(0x100000001b3);
        }
    }
    hash
}

/// Oracle with per-comparison label noise. The per-call randomness is
/// derived from the seed and both pair ids, so outcomes do not depend on
/// the order comparisons are issued in.
#[derive(Debug, Clone)]
pub struct NoisyOracleComparator {
    truths: HashMap<String, f64>,
    flip_probability: f64,
    seed: u64,
}

impl NoisyOracleComparator {
    pub fn new(
        truths: HashMap<String, f64>,
        flip_probability: f64,
        seed: u64,
    ) -> Result<Self, InputError> {
        if !(0.0..=1.0).contains(&flip_probability) {
            return Err(InputError::Invalid(format!(
                "flip_probability must be in [0, 1], got {flip_probability}"
            )));
        }
        Ok(Self {
            truths,
            flip_probability,
            seed,
        })
    }
}

#[async_trait]
impl Comparator for NoisyOracleComparator {
    async fn compare(
        &self,
        target: &QueryResponsePair,
        reference: &ScoredReference,
    ) -> Result<ComparisonOutcome, ComparatorError> {
        let target_id = require_id(target, "target")?;
        let reference_id = require_id(reference.pair(), "reference")?;
        let truth = self
            .truths
            .get(target_id)
            .copied()
            .ok_or_else(|| ComparatorError::MissingScore(target_id.to_string()))?;
        let call_seed = self.seed ^ fnv1a64(&[target_id.as_bytes(), reference_id.as_bytes()]);
        noisy_oracle_compare(truth, reference.score(), self.flip_probability, call_seed)
            .map_err(|e| ComparatorError::Invalid(e.to_string()))
    }
}
