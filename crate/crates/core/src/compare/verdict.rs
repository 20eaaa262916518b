//! Verdict extraction from judge completions.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// How the template asks the judge to express its verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerdictFormat {
    /// A bare `1`, `2` or `3` in the completion.
    Plain,
    /// `[1]`, `[2]` or `[3]`.
    Bracketed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParsedVerdict {
    Pair1Better,
    Pair2Better,
    Tie,
    Unparseable,
}

/// A raw completion and what was read out of it. `Unparseable` is a value,
/// not an error; policy decides what to do with it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub raw: String,
    pub parsed: ParsedVerdict,
}

fn digit_verdict(d: &str) -> ParsedVerdict {
    match d {
        "1" => ParsedVerdict::Pair1Better,
        "2" => ParsedVerdict::Pair2Better,
        _ => ParsedVerdict::Tie,
    }
}

static PAIR_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)pair").expect("valid regex"));
static STANDALONE_DIGIT_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\b([123])\b").expect("valid regex"));
static TRAILING_DIGIT_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\b([123])\b[^0-9A-Za-z]*$").expect("valid regex"));

fn parse_plain(completion: &str) -> ParsedVerdict {
    // First standalone verdict digit after the phrase "pair".
    if let Some(m) = PAIR_RE.find(completion) {
        if let Some(caps) = STANDALONE_DIGIT_RE.captures(&completion[m.end()..]) {
            return digit_verdict(&caps[1]);
        }
    }
    // Otherwise a bare digit trailing the last non-empty line.
    if let Some(line) = completion.lines().rev().find(|l| !l.trim().is_empty()) {
        if let Some(caps) = TRAILING_DIGIT_RE.captures(line.trim_end()) {
            return digit_verdict(&caps[1]);
        }
    }
    ParsedVerdict::Unparseable
}

fn parse_bracketed(completion: &str) -> ParsedVerdict {
    let hits = ["[1]", "[2]", "[3]"]
        .iter()
        .filter_map(|tok| completion.find(tok).map(|pos| (pos, *tok)));
    match hits.min_by_key(|(pos, _)| *pos) {
        Some((_, "[1]")) => ParsedVerdict::Pair1Better,
        Some((_, "[2]")) => ParsedVerdict::Pair2Better,
        Some((_, "[3]")) => ParsedVerdict::Tie,
        _ => ParsedVerdict::Unparseable,
    }
}

/// Scan a completion for the first recognizable verdict token. Total over
/// all inputs: anything unrecognized parses as `Unparseable`.
pub fn parse_verdict(completion: &str, format: VerdictFormat) -> Verdict {
    let parsed = match format {
        VerdictFormat::Plain => parse_plain(completion),
        VerdictFormat::Bracketed => parse_bracketed(completion),
    };
    Verdict {
        raw: completion.to_string(),
        parsed,
    }
}
