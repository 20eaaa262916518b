//! `mrank mock serve`: stand up the canned chat-completion endpoint from
//! a script file, for demos and offline runs.

use std::collections::HashMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use mrank_core::client::mock::{CannedResponse, MockScript, MockServer};

#[derive(Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptEntry {
    #[serde(default)]
    content: Option<String>,
    #[serde(default)]
    prompt_tokens: Option<u64>,
    #[serde(default)]
    completion_tokens: Option<u64>,
    #[serde(default)]
    status: Option<u16>,
    #[serde(default)]
    body: Option<String>,
}

impl ScriptEntry {
    fn into_canned(self) -> Result<CannedResponse> {
        match (self.content, self.status) {
            (Some(content), None) => Ok(match (self.prompt_tokens, self.completion_tokens) {
                (Some(p), Some(c)) => CannedResponse::with_usage(content, p, c),
                _ => CannedResponse::text(content),
            }),
            (None, Some(status)) => Ok(CannedResponse::failure(
                status,
                self.body.unwrap_or_else(|| "scripted failure".to_string()),
            )),
            _ => bail!("each script entry needs either `content` or `status`"),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase", tag = "mode")]
enum ScriptFile {
    Sequence {
        responses: Vec<ScriptEntry>,
    },
    Map {
        responses: HashMap<String, ScriptEntry>,
    },
}

pub struct MockArgs {
    pub script: PathBuf,
    pub listen: String,
}

pub async fn serve(args: MockArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.script)
        .with_context(|| format!("failed to read script {}", args.script.display()))?;
    let file: ScriptFile = serde_json::from_str(&text)
        .with_context(|| format!("script {} is not valid", args.script.display()))?;
    let script = match file {
        ScriptFile::Sequence { responses } => MockScript::Sequence(
            responses
                .into_iter()
                .map(ScriptEntry::into_canned)
                .collect::<Result<_>>()?,
        ),
        ScriptFile::Map { responses } => MockScript::Map(
            responses
                .into_iter()
                .map(|(k, v)| Ok((k, v.into_canned()?)))
                .collect::<Result<_>>()?,
        ),
    };

    let server = MockServer::start_on(&args.listen, script)
        .await
        .map_err(|e| anyhow::anyhow!(e))?;
    println!("mock endpoint listening at {}", server.base_url());
    tokio::signal::ctrl_c().await?;
    server.shutdown().await;
    Ok(())
}
