//! Command implementations behind the CLI surface.

pub mod cascade;
pub mod detect;
pub mod filter;
pub mod loss;
pub mod mock;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Result};

use mrank_core::client::ChatClient;
use mrank_core::compare::{Comparator, PromptComparator, ScoreComparator};

use crate::config::{AppConfig, ComparatorKind};

/// Settings shared by every subcommand.
#[derive(Debug)]
pub struct Global {
    pub config_path: Option<PathBuf>,
    pub config: AppConfig,
    pub seed: u64,
    pub concurrency: usize,
    pub audit: bool,
}

impl Global {
    /// The chat client, wired to an audit log next to the report when
    /// `--audit` is set.
    pub fn client(&self, report_path: Option<&Path>) -> Result<Arc<ChatClient>> {
        if !self.audit {
            return Ok(Arc::new(ChatClient::new()));
        }
        let audit_path = match report_path {
            Some(p) if !p.as_os_str().is_empty() => {
                let mut name = p
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "run".to_string());
                name.push_str(".audit.jsonl");
                p.with_file_name(name)
            }
            _ => PathBuf::from("audit.jsonl"),
        };
        if let Some(parent) = audit_path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        Ok(Arc::new(ChatClient::new().with_audit_log(&audit_path)?))
    }
}

/// Resolve the judge comparator for commands that accept prompt or score
/// judging. Oracle judging is built per command because it needs ground
/// truth.
pub struct JudgeSpec<'a> {
    pub kind: Option<ComparatorKind>,
    pub judge_endpoint: Option<&'a str>,
    pub template: Option<&'a str>,
    pub template_path: Option<&'a Path>,
    pub template_format: Option<mrank_core::compare::VerdictFormat>,
    pub scores_path: Option<&'a Path>,
    pub tie_epsilon: Option<f64>,
    pub default_template: &'a str,
}

pub fn build_judge(
    global: &Global,
    client: Arc<ChatClient>,
    spec: &JudgeSpec<'_>,
) -> Result<Arc<dyn Comparator>> {
    let cfg = &global.config;
    let kind = spec.kind.unwrap_or(cfg.comparator.kind);
    match kind {
        ComparatorKind::Prompt => {
            let endpoint_name = spec
                .judge_endpoint
                .or(cfg.comparator.judge_endpoint.as_deref());
            let Some(endpoint_name) = endpoint_name else {
                bail!("the prompt comparator needs --judge-endpoint or comparator.judge_endpoint in config");
            };
            let endpoint = cfg.endpoint(endpoint_name)?;
            let template = cfg.template(
                spec.template,
                spec.template_path,
                spec.template_format,
                spec.default_template,
            )?;
            let comparator = PromptComparator::new(client, endpoint, template)
                .with_policy(cfg.comparator.unparseable)
                .with_swapped_positions(cfg.comparator.swap_positions)
                .with_debias(cfg.comparator.debias)
                .with_max_tokens(cfg.comparator.max_tokens);
            Ok(Arc::new(comparator))
        }
        ComparatorKind::Score => {
            let path = spec.scores_path.or(cfg.comparator.scores_path.as_deref());
            let Some(path) = path else {
                bail!("the score comparator needs --scores or comparator.scores_path in config");
            };
            let scores = crate::config::load_scores(path)?;
            let tie_epsilon = spec.tie_epsilon.unwrap_or(cfg.comparator.tie_epsilon);
            Ok(Arc::new(
                ScoreComparator::new(scores, tie_epsilon).map_err(|e| anyhow::anyhow!(e))?,
            ))
        }
        ComparatorKind::Oracle => {
            bail!("the oracle comparator is only available where ground truth exists (detect)");
        }
    }
}
