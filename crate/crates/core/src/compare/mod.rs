//! The comparison contract and its implementations.
//!
//! A comparator answers one question: is the target query-response pair
//! better than, equal to, or worse than a reference pair. Implementations
//! here cover prompting a judge model over a chat endpoint, comparing
//! externally supplied quality scores, and ground-truth oracles for tests.

mod numeric;
mod prompt;
mod template;
mod verdict;

pub use numeric::{
    noisy_oracle_compare, oracle_compare, score_compare, NoisyOracleComparator, OracleComparator,
    ScoreComparator, ScorePair,
};
pub use prompt::{PromptComparator, UnparseablePolicy};
pub use template::{render_prompt, PromptTemplate, TemplateError, PLACEHOLDERS};
pub use verdict::{parse_verdict, ParsedVerdict, Verdict, VerdictFormat};

use async_trait::async_trait;
use thiserror::Error;

use crate::client::ClientError;
use crate::pair::{QueryResponsePair, ScoredReference};
use crate::rank::ComparisonOutcome;

#[derive(Debug, Error)]
pub enum ComparatorError {
    #[error("{0} pair has no id; this comparator resolves scores by id")]
    MissingId(String),
    #[error("no score known for pair {0}")]
    MissingScore(String),
    #[error("unparseable verdict: {0:?}")]
    UnparseableVerdict(String),
    #[error("judge endpoint failure: {0}")]
    Endpoint(#[from] ClientError),
    #[error("{0}")]
    Invalid(String),
}

/// The comparison contract: produce an outcome for one target/reference
/// pairing. Implementations must be safe to call concurrently.
#[async_trait]
pub trait Comparator: Send + Sync {
    async fn compare(
        &self,
        target: &QueryResponsePair,
        reference: &ScoredReference,
    ) -> Result<ComparisonOutcome, ComparatorError>;

    /// Tokens this comparator has consumed, when it talks to an endpoint.
    fn usage_totals(&self) -> Option<crate::client::Usage> {
        None
    }
}

/// A fixed-outcome comparator, handy in tests and dry runs.
#[derive(Debug, Clone, Copy)]
pub struct ConstantComparator(pub ComparisonOutcome);

#[async_trait]
impl Comparator for ConstantComparator {
    async fn compare(
        &self,
        _target: &QueryResponsePair,
        _reference: &ScoredReference,
    ) -> Result<ComparisonOutcome, ComparatorError> {
        Ok(self.0)
    }
}

/// Comparator driven by a closure over the two pair ids. Test plumbing for
/// scripting outcomes per (target, reference) combination.
pub struct FnComparator<F>(pub F);

#[async_trait]
impl<F> Comparator for FnComparator<F>
where
    F: Fn(&QueryResponsePair, &ScoredReference) -> Result<ComparisonOutcome, ComparatorError>
        + Send
        + Sync,
{
    async fn compare(
        &self,
        target: &QueryResponsePair,
        reference: &ScoredReference,
    ) -> Result<ComparisonOutcome, ComparatorError> {
        (self.0)(target, reference)
    }
}
