//! Comparator that prompts a judge model over a chat endpoint.

use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use crate::client::{ChatClient, ChatRequest, EndpointConfig, Usage};
use crate::pair::{QueryResponsePair, ScoredReference};
use crate::rank::ComparisonOutcome;

use super::template::{render_prompt, PromptTemplate};
use super::verdict::{parse_verdict, ParsedVerdict};
use super::{Comparator, ComparatorError};

/// What to do when the judge's completion yields no verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnparseablePolicy {
    /// Treat as a tie (the mildest vote) and log a warning.
    #[default]
    Tie,
    /// Fail the comparison.
    Strict,
}

/// Prompts a judge endpoint once per comparison at temperature 0 and maps
/// the parsed verdict to an outcome. Position 1 holds the target unless
/// `swap_positions` is set; `debias` queries both orders and only trusts
/// agreement.
pub struct PromptComparator {
    client: Arc<ChatClient>,
    endpoint: EndpointConfig,
    template: PromptTemplate,
    policy: UnparseablePolicy,
    swap_positions: bool,
    debias: bool,
    max_tokens: u32,
    usage: Mutex<Usage>,
}

impl PromptComparator {
    pub fn new(
        client: Arc<ChatClient>,
        endpoint: EndpointConfig,
        template: PromptTemplate,
    ) -> Self {
        Self {
            client,
            endpoint,
            template,
            policy: UnparseablePolicy::default(),
            swap_positions: false,
            debias: false,
            max_tokens: 512,
            usage: Mutex::new(Usage::default()),
        }
    }

    pub fn with_policy(mut self, policy: UnparseablePolicy) -> Self {
        self.policy = policy;
        self
    }

    /// Put the reference in position 1 and the target in position 2.
    pub fn with_swapped_positions(mut self, swap: bool) -> Self {
        self.swap_positions = swap;
        self
    }

    /// Query both orders; disagreement becomes a tie.
    pub fn with_debias(mut self, debias: bool) -> Self {
        self.debias = debias;
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    /// Judge-endpoint tokens consumed so far.
    pub fn usage_totals(&self) -> Usage {
        *self.usage.lock().expect("usage lock")
    }

    /// One judge call with the target in the given position.
    async fn ask(
        &self,
        target: &QueryResponsePair,
        reference: &QueryResponsePair,
        target_first: bool,
    ) -> Result<ComparisonOutcome, ComparatorError> {
        let prompt = if target_first {
            render_prompt(&self.template, target, reference)
        } else {
            render_prompt(&self.template, reference, target)
        };
        let request = ChatRequest::deterministic(prompt, self.max_tokens)?;
        let completion = self.client.chat_complete(&self.endpoint, &request).await?;
        self.usage
            .lock()
            .expect("usage lock")
            .add(&completion.usage);

        let verdict = parse_verdict(&completion.text, self.template.verdict_format());
        let outcome = match verdict.parsed {
            ParsedVerdict::Pair1Better => ComparisonOutcome::TargetBetter,
            ParsedVerdict::Pair2Better => ComparisonOutcome::TargetWorse,
            ParsedVerdict::Tie => ComparisonOutcome::Tie,
            ParsedVerdict::Unparseable => match self.policy {
                UnparseablePolicy::Strict => {
                    return Err(ComparatorError::UnparseableVerdict(verdict.raw))
                }
                UnparseablePolicy::Tie => {
                    tracing::warn!(
                        template = self.template.name(),
                        raw = %verdict.raw,
                        "unparseable verdict, falling back to tie"
                    );
                    ComparisonOutcome::Tie
                }
            },
        };
        // The verdict names position 1/2; flip when the target sat second.
        Ok(if target_first {
            outcome
        } else {
            outcome.flipped()
        })
    }
}

#[async_trait]
impl Comparator for PromptComparator {
    fn usage_totals(&self) -> Option<Usage> {
        Some(*self.usage.lock().expect("usage lock"))
    }

    async fn compare(
        &self,
        target: &QueryResponsePair,
        reference: &ScoredReference,
    ) -> Result<ComparisonOutcome, ComparatorError> {
        let reference = reference.pair();
        if self.debias {
            let forward = self.ask(target, reference, true).await?;
            let backward = self.ask(target, reference, false).await?;
            return Ok(if forward == backward {
                forward
            } else {
                ComparisonOutcome::Tie
            });
        }
        self.ask(target, reference, !self.swap_positions).await
    }
}
