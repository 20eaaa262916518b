//! Query-response pairs and scored reference sets, the data the ranking
//! engine operates on.

use serde::Serialize;
use thiserror::Error;

/// Validation failures on engine inputs.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum InputError {
    #[error("query must be non-empty")]
    EmptyQuery,
    #[error("score must be finite, got {0}")]
    NonFiniteScore(f64),
    #[error("reference set must contain at least one reference")]
    EmptyReferenceSet,
    #[error("vote config requires delta_plus > 0 and delta_minus < 0, got ({plus}, {minus})")]
    InvalidDeltas { plus: f64, minus: f64 },
    #[error("vote values must be finite")]
    NonFiniteVote,
    #[error("vote list must be non-empty")]
    EmptyVotes,
    #[error("{0}")]
    Invalid(String),
}

/// A query text plus the response under judgment. The atomic unit the
/// engine compares.
///
/// The query must be non-empty; the response may be empty (a model may
/// emit nothing) and judgment still proceeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryResponsePair {
    query: String,
    response: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<String>,
}

impl QueryResponsePair {
    pub fn new(query: impl Into<String>, response: impl Into<String>) -> Result<Self, InputError> {
        let query = query.into();
        if query.is_empty() {
            return Err(InputError::EmptyQuery);
        }
        Ok(Self {
            query,
            response: response.into(),
            id: None,
        })
    }

    /// Attach an opaque identifier used for reporting and score lookups.
    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = Some(id.into());
        self
    }

    pub fn query(&self) -> &str {
        &self.query
    }

    pub fn response(&self) -> &str {
        &self.response
    }

    pub fn id(&self) -> Option<&str> {
        self.id.as_deref()
    }
}

/// A reference pair carrying a pre-determined reliability score.
///
/// Binary tasks use exactly +1 or -1; continuous tasks may use any finite
/// real value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredReference {
    pair: QueryResponsePair,
    score: f64,
}

impl ScoredReference {
    pub fn new(pair: QueryResponsePair, score: f64) -> Result<Self, InputError> {
        if !score.is_finite() {
            return Err(InputError::NonFiniteScore(score));
        }
        Ok(Self { pair, score })
    }

    pub fn pair(&self) -> &QueryResponsePair {
        &self.pair
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    pub fn id(&self) -> Option<&str> {
        self.pair.id()
    }
}

/// An ordered list of scored references (at least one).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceSet {
    references: Vec<ScoredReference>,
}

impl ReferenceSet {
    pub fn new(references: Vec<ScoredReference>) -> Result<Self, InputError> {
        if references.is_empty() {
            return Err(InputError::EmptyReferenceSet);
        }
        Ok(Self { references })
    }

    pub fn len(&self) -> usize {
        self.references.len()
    }

    pub fn is_empty(&self) -> bool {
        self.references.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ScoredReference> {
        self.references.iter()
    }

    pub fn get(&self, index: usize) -> Option<&ScoredReference> {
        self.references.get(index)
    }

    pub fn scores(&self) -> Vec<f64> {
        self.references.iter().map(|r| r.score).collect()
    }

    /// Keep only the first `k` references.
    pub fn truncate(mut self, k: usize) -> Result<Self, InputError> {
        if k == 0 {
            return Err(InputError::EmptyReferenceSet);
        }
        self.references.truncate(k);
        Ok(self)
    }

    /// Drop references whose score is exactly zero. Zero-score references
    /// contribute nothing to the vote total, so they are retained by
    /// default; this is the opt-in removal.
    pub fn without_zero_scores(self) -> Result<Self, InputError> {
        let kept: Vec<ScoredReference> = self
            .references
            .into_iter()
            .filter(|r| r.score != 0.0)
            .collect();
        Self::new(kept)
    }

    /// True when every reference score is zero. The vote total is then
    /// identically zero and the s >= 0 rule judges everything reliable.
    pub fn all_scores_zero(&self) -> bool {
        self.references.iter().all(|r| r.score == 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_query_rejected() {
        assert_eq!(
            QueryResponsePair::new("", "resp").unwrap_err(),
            InputError::EmptyQuery
        );
    }

    #[test]
    fn empty_response_allowed() {
        let p = QueryResponsePair::new("q", "").unwrap();
        assert_eq!(p.response(), "");
    }

    #[test]
    fn non_finite_score_rejected() {
        let p = QueryResponsePair::new("q", "r").unwrap();
        assert!(ScoredReference::new(p.clone(), f64::NAN).is_err());
        assert!(ScoredReference::new(p.clone(), f64::INFINITY).is_err());
        assert!(ScoredReference::new(p, -1.0).is_ok());
    }

    #[test]
    fn reference_set_requires_one() {
        assert_eq!(
            ReferenceSet::new(vec![]).unwrap_err(),
            InputError::EmptyReferenceSet
        );
    }

    #[test]
    fn without_zero_scores_drops_only_zeros() {
        let mk = |id: &str, s: f64| {
            ScoredReference::new(QueryResponsePair::new("q", "r").unwrap().with_id(id), s).unwrap()
        };
        let set = ReferenceSet::new(vec![mk("a", 1.0), mk("b", 0.0), mk("c", -1.0)]).unwrap();
        let trimmed = set.without_zero_scores().unwrap();
        assert_eq!(trimmed.len(), 2);
        assert_eq!(trimmed.scores(), vec![1.0, -1.0]);
    }

    #[test]
    fn without_zero_scores_errors_when_all_zero() {
        let mk =
            |s: f64| ScoredReference::new(QueryResponsePair::new("q", "r").unwrap(), s).unwrap();
        let set = ReferenceSet::new(vec![mk(0.0), mk(0.0)]).unwrap();
        assert!(set.all_scores_zero());
        assert!(set.without_zero_scores().is_err());
    }
}
