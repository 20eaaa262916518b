//! Pairwise comparison prompt templates.
//!
//! A template body carries the four placeholders `{Query 1}`,
//! `{Response 1}`, `{Query 2}`, `{Response 2}`, each exactly once.
//! Built-in templates cover correctness judging (plain and bracketed
//! verdict variants) and instruction-data quality judging; custom
//! templates load from plain-text files.

use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

use crate::pair::QueryResponsePair;

use super::verdict::VerdictFormat;

pub const PLACEHOLDERS: [&str; 4] = ["{Query 1}", "{Response 1}", "{Query 2}", "{Response 2}"];

const CORRECTNESS_BODY: &str = include_str!("templates/correctness.txt");
const CORRECTNESS_GPT_BODY: &str = include_str!("templates/correctness_gpt.txt");
const INSTRUCTION_QUALITY_BODY: &str = include_str!("templates/instruction_quality.txt");

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template `{name}` is missing placeholder {placeholder}")]
    MissingPlaceholder { name: String, placeholder: String },
    #[error(
        "template `{name}` contains placeholder {placeholder} {count} times, expected exactly once"
    )]
    DuplicatePlaceholder {
        name: String,
        placeholder: String,
        count: usize,
    },
    #[error("failed to read template file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A named prompt template plus the verdict format its completions use.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    name: String,
    body: String,
    verdict_format: VerdictFormat,
}

impl PromptTemplate {
    pub fn new(
        name: impl Into<String>,
        body: impl Into<String>,
        verdict_format: VerdictFormat,
    ) -> Result<Self, TemplateError> {
        let name = name.into();
        let body = body.into();
        for ph in PLACEHOLDERS {
            match body.matches(ph).count() {
                1 => {}
                0 => {
                    return Err(TemplateError::MissingPlaceholder {
                        name,
                        placeholder: ph.to_string(),
                    })
                }
                count => {
                    return Err(TemplateError::DuplicatePlaceholder {
                        name,
                        placeholder: ph.to_string(),
                        count,
                    })
                }
            }
        }
        Ok(Self {
            name,
            body,
            verdict_format,
        })
    }

    /// Correctness comparison with a plain `1`/`2`/`3` verdict.
    pub fn correctness() -> Self {
        Self::new("correctness", CORRECTNESS_BODY, VerdictFormat::Plain)
            .expect("built-in template is valid")
    }

    /// Correctness comparison asking for a bracketed `[1]`/`[2]`/`[3]`
    /// verdict, the variant used with API chat models.
    pub fn correctness_gpt() -> Self {
        Self::new(
            "correctness-gpt",
            CORRECTNESS_GPT_BODY,
            VerdictFormat::Bracketed,
        )
        .expect("built-in template is valid")
    }

    /// Instruction-data quality comparison over six criteria, plain verdict.
    pub fn instruction_quality() -> Self {
        Self::new(
            "instruction-quality",
            INSTRUCTION_QUALITY_BODY,
            VerdictFormat::Plain,
        )
        .expect("built-in template is valid")
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "correctness" => Some(Self::correctness()),
            "correctness-gpt" => Some(Self::correctness_gpt()),
            "instruction-quality" => Some(Self::instruction_quality()),
            _ => None,
        }
    }

    pub const BUILTIN_NAMES: &'static [&'static str] =
        &["correctness", "correctness-gpt", "instruction-quality"];

    /// Load a template from a plain-text file; the file stem becomes the
    /// template name.
    pub fn from_file(
        path: impl AsRef<Path>,
        verdict_format: VerdictFormat,
    ) -> Result<Self, TemplateError> {
        let path = path.as_ref();
        let body = std::fs::read_to_string(path).map_err(|source| TemplateError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".to_string());
        Self::new(name, body, verdict_format)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn verdict_format(&self) -> VerdictFormat {
        self.verdict_format
    }
}

static PLACEHOLDER_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\{(?:Query|Response) [12]\}").expect("valid regex"));

/// Substitute the target into position 1 and the reference into position 2.
///
/// Substitution is a single pass, so placeholder-looking text inside the
/// pairs is emitted verbatim. Output is byte-deterministic.
pub fn render_prompt(
    template: &PromptTemplate,
    target: &QueryResponsePair,
    reference: &QueryResponsePair,
) -> String {
    PLACEHOLDER_RE
        .replace_all(&template.body, |caps: &regex::Captures| {
            match caps.get(0).map(|m| m.as_str()) {
                Some("{Query 1}") => target.query(),
                Some("{Response 1}") => target.response(),
                Some("{Query 2}") => reference.query(),
                Some("{Response 2}") => reference.response(),
                _ => unreachable!("regex only matches the four placeholders"),
            }
        })
        .into_owned()
}
