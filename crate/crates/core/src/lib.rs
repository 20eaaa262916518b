//! Reliability judgment for model responses by pairwise comparison
//! against scored reference pairs, plus the two systems built on top of
//! it: a cheap-to-expensive model cascade and an iterative
//! instruction-data filter with a preference-loss kit.

pub mod cascade;
pub mod client;
pub mod compare;
pub mod curation;
pub mod detect;
pub mod loss;
pub mod pair;
pub mod rank;

pub use compare::{Comparator, ComparatorError};
pub use pair::{InputError, QueryResponsePair, ReferenceSet, ScoredReference};
pub use rank::{
    aggregate, decide, meta_rank, vote_value, ComparisonOutcome, JudgeError, MetaRankDecision,
    VoteConfig,
};
