//! Application configuration: named endpoints, comparator selection, vote
//! deltas, and cascade wiring, loaded from a JSON document.
//!
//! Unknown keys are rejected with a nearest-key suggestion so typos like
//! `detla_plus` fail loudly instead of silently falling back to defaults.
//! API keys are referenced by environment-variable name and resolved at
//! load time; secrets never live in config files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use serde::Deserialize;

use mrank_core::client::{EndpointConfig, EndpointRole};
use mrank_core::compare::{PromptTemplate, UnparseablePolicy, VerdictFormat};
use mrank_core::VoteConfig;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointEntry {
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_role")]
    pub role: EndpointRole,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub rate_limit_rps: Option<f64>,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

fn default_role() -> EndpointRole {
    EndpointRole::Judge
}

fn default_timeout_secs() -> u64 {
    60
}

fn default_max_retries() -> u32 {
    2
}

fn default_backoff_ms() -> u64 {
    200
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ComparatorKind {
    #[default]
    Prompt,
    Score,
    Oracle,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparatorEntry {
    #[serde(default)]
    pub kind: ComparatorKind,
    #[serde(default)]
    pub judge_endpoint: Option<String>,
    /// Built-in template name.
    #[serde(default)]
    pub template: Option<String>,
    /// Template loaded from a file; requires `template_format`.
    #[serde(default)]
    pub template_path: Option<PathBuf>,
    #[serde(default)]
    pub template_format: Option<VerdictFormat>,
    #[serde(default)]
    pub unparseable: UnparseablePolicy,
    #[serde(default)]
    pub swap_positions: bool,
    #[serde(default)]
    pub debias: bool,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub scores_path: Option<PathBuf>,
    #[serde(default)]
    pub tie_epsilon: f64,
}

fn default_max_tokens() -> u32 {
    512
}

impl Default for ComparatorEntry {
    fn default() -> Self {
        Self {
            kind: ComparatorKind::default(),
            judge_endpoint: None,
            template: None,
            template_path: None,
            template_format: None,
            unparseable: UnparseablePolicy::default(),
            swap_positions: false,
            debias: false,
            max_tokens: default_max_tokens(),
            scores_path: None,
            tie_epsilon: 0.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoteEntry {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub delta_plus: Option<f64>,
    #[serde(default)]
    pub delta_zero: Option<f64>,
    #[serde(default)]
    pub delta_minus: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeEntry {
    pub cheap_endpoint: String,
    pub expensive_endpoint: String,
    pub ref_mode: mrank_core::cascade::RefMode,
    pub references_path: PathBuf,
    #[serde(default)]
    pub drop_zero_score_refs: bool,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    #[serde(default)]
    pub endpoints: BTreeMap<String, EndpointEntry>,
    #[serde(default)]
    pub comparator: ComparatorEntry,
    #[serde(default)]
    pub vote: Option<VoteEntry>,
    #[serde(default)]
    pub cascade: Option<CascadeEntry>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub concurrency: Option<usize>,
    #[serde(default)]
    pub audit: Option<bool>,
}

const ROOT_KEYS: &[&str] = &[
    "endpoints",
    "comparator",
    "vote",
    "cascade",
    "seed",
    "concurrency",
    "audit",
];
const ENDPOINT_KEYS: &[&str] = &[
    "base_url",
    "model",
    "role",
    "api_key_env",
    "timeout_secs",
    "max_retries",
    "rate_limit_rps",
    "backoff_ms",
];
const COMPARATOR_KEYS: &[&str] = &[
    "kind",
    "judge_endpoint",
    "template",
    "template_path",
    "template_format",
    "unparseable",
    "swap_positions",
    "debias",
    "max_tokens",
    "scores_path",
    "tie_epsilon",
];
const VOTE_KEYS: &[&str] = &["preset", "delta_plus", "delta_zero", "delta_minus"];
const CASCADE_KEYS: &[&str] = &[
    "cheap_endpoint",
    "expensive_endpoint",
    "ref_mode",
    "references_path",
    "drop_zero_score_refs",
    "max_tokens",
];

fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn suggest<'a>(key: &str, allowed: &[&'a str]) -> Option<&'a str> {
    allowed
        .iter()
        .map(|cand| (edit_distance(key, cand), *cand))
        .filter(|(d, _)| *d <= 2)
        .min_by_key(|(d, _)| *d)
        .map(|(_, cand)| cand)
}

fn check_keys(value: &serde_json::Value, allowed: &[&str], path: &str, problems: &mut Vec<String>) {
    let Some(obj) = value.as_object() else { return };
    for key in obj.keys() {
        if !allowed.contains(&key.as_str()) {
            let mut msg = format!("unknown key `{path}{key}`");
            if let Some(s) = suggest(key, allowed) {
                msg.push_str(&format!(" (did you mean `{s}`?)"));
            }
            problems.push(msg);
        }
    }
}

/// Structural validation before typed parsing: every unknown key is
/// reported at once, each with its closest valid spelling.
fn validate_keys(root: &serde_json::Value) -> Vec<String> {
    let mut problems = Vec::new();
    check_keys(root, ROOT_KEYS, "", &mut problems);
    if let Some(endpoints) = root.get("endpoints").and_then(|v| v.as_object()) {
        for (name, entry) in endpoints {
            check_keys(
                entry,
                ENDPOINT_KEYS,
                &format!("endpoints.{name}."),
                &mut problems,
            );
        }
    }
    if let Some(v) = root.get("comparator") {
        check_keys(v, COMPARATOR_KEYS, "comparator.", &mut problems);
    }
    if let Some(v) = root.get("vote") {
        check_keys(v, VOTE_KEYS, "vote.", &mut problems);
    }
    if let Some(v) = root.get("cascade") {
        check_keys(v, CASCADE_KEYS, "cascade.", &mut problems);
    }
    problems
}

/// Parse and validate a config file, resolving API keys from the
/// environment.
pub fn load_config(path: &Path) -> Result<AppConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("failed to read config {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("config {} is not valid JSON", path.display()))?;
    let problems = validate_keys(&value);
    if !problems.is_empty() {
        bail!(
            "invalid config {}:\n  {}",
            path.display(),
            problems.join("\n  ")
        );
    }
    let config: AppConfig = serde_json::from_value(value)
        .with_context(|| format!("config {} failed validation", path.display()))?;
    for (name, endpoint) in &config.endpoints {
        if let Some(env_name) = &endpoint.api_key_env {
            if std::env::var(env_name).is_err() {
                bail!(
                    "endpoint `{name}` references api_key_env `{env_name}`, but that environment variable is not set"
                );
            }
        }
    }
    Ok(config)
}

impl AppConfig {
    /// Resolve a named endpoint into a client config, reading its API key
    /// from the environment.
    pub fn endpoint(&self, name: &str) -> Result<EndpointConfig> {
        let entry = self.endpoints.get(name).ok_or_else(|| {
            anyhow!(
                "endpoint `{name}` is not defined; configured endpoints: {}",
                self.endpoints
                    .keys()
                    .map(String::as_str)
                    .collect::<Vec<_>>()
                    .join(", ")
            )
        })?;
        let mut cfg = EndpointConfig::new(entry.base_url.clone(), entry.model.clone(), entry.role);
        cfg.timeout = Duration::from_secs(entry.timeout_secs);
        cfg.max_retries = entry.max_retries;
        cfg.rate_limit = entry.rate_limit_rps;
        cfg.backoff = Duration::from_millis(entry.backoff_ms);
        if let Some(env_name) = &entry.api_key_env {
            cfg.api_key = Some(std::env::var(env_name).with_context(|| {
                format!("endpoint `{name}`: environment variable `{env_name}` is not set")
            })?);
        }
        cfg.validate()
            .map_err(|e| anyhow!("endpoint `{name}`: {e}"))?;
        Ok(cfg)
    }

    /// Vote deltas from config, overridable by a CLI preset or explicit
    /// deltas; defaults to (1, 0, -1).
    pub fn vote_config(
        &self,
        preset: Option<&str>,
        explicit: Option<(f64, f64, f64)>,
    ) -> Result<VoteConfig> {
        if let Some((p, z, m)) = explicit {
            return VoteConfig::new(p, z, m).map_err(|e| anyhow!(e));
        }
        if let Some(name) = preset {
            return VoteConfig::preset(name).ok_or_else(|| {
                anyhow!(
                    "unknown vote preset `{name}`; available: {}",
                    VoteConfig::PRESET_NAMES.join(", ")
                )
            });
        }
        match &self.vote {
            None => Ok(VoteConfig::default()),
            Some(entry) => {
                if let Some(name) = &entry.preset {
                    return VoteConfig::preset(name).ok_or_else(|| {
                        anyhow!(
                            "unknown vote preset `{name}`; available: {}",
                            VoteConfig::PRESET_NAMES.join(", ")
                        )
                    });
                }
                match (entry.delta_plus, entry.delta_zero, entry.delta_minus) {
                    (Some(p), Some(z), Some(m)) => VoteConfig::new(p, z, m).map_err(|e| anyhow!(e)),
                    _ => bail!("vote config needs either `preset` or all three deltas"),
                }
            }
        }
    }

    /// Resolve the prompt template named in config or CLI flags.
    pub fn template(
        &self,
        cli_template: Option<&str>,
        cli_template_path: Option<&Path>,
        cli_format: Option<VerdictFormat>,
        default_builtin: &str,
    ) -> Result<PromptTemplate> {
        if let Some(path) = cli_template_path.or(self.comparator.template_path.as_deref()) {
            let format = cli_format
                .or(self.comparator.template_format)
                .ok_or_else(|| {
                    anyhow!("a template file needs a verdict format (plain or bracketed)")
                })?;
            return PromptTemplate::from_file(path, format).map_err(|e| anyhow!(e));
        }
        let name = cli_template
            .or(self.comparator.template.as_deref())
            .unwrap_or(default_builtin);
        PromptTemplate::builtin(name).ok_or_else(|| {
            anyhow!(
                "unknown template `{name}`; built-ins: {}",
                PromptTemplate::BUILTIN_NAMES.join(", ")
            )
        })
    }
}

/// Load JSON Lines scores `{"id", "score"}` for the score comparator.
pub fn load_scores(path: &Path) -> Result<std::collections::HashMap<String, f64>> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Row {
        id: String,
        score: f64,
    }
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("failed to read scores {}", path.display()))?;
    let mut map = std::collections::HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Row = serde_json::from_str(line)
            .with_context(|| format!("{}:{}", path.display(), idx + 1))?;
        map.insert(row.id, row.score);
    }
    Ok(map)
}
