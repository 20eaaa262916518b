//! Run manifests: every report gets a sibling file recording the exact
//! command line, seeds, artifact version, and SHA-256 digests of every
//! input, so a report can be tied back to what produced it.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command_line: Vec<String>,
    pub artifact_version: String,
    pub timestamp: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<InputDigest>,
    pub inputs: Vec<InputDigest>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("failed to read {}", path.display()))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn digest_of(path: &Path) -> Result<InputDigest> {
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256: sha256_file(path)?,
    })
}

impl RunManifest {
    pub fn collect(seed: u64, config_path: Option<&Path>, inputs: &[PathBuf]) -> Result<Self> {
        Ok(Self {
            command_line: std::env::args().collect(),
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: chrono::Utc::now().to_rfc3339(),
            seed,
            config: config_path.map(digest_of).transpose()?,
            inputs: inputs.iter().map(|p| digest_of(p)).collect::<Result<_>>()?,
        })
    }

    /// Recompute every recorded digest; true when all still match.
    pub fn verify(&self) -> Result<bool> {
        for input in self.inputs.iter().chain(self.config.as_ref()) {
            if sha256_file(Path::new(&input.path))? != input.sha256 {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// The manifest path that sits next to a report file (or inside a report
/// directory).
pub fn manifest_path(report_path: &Path) -> PathBuf {
    if report_path.is_dir() {
        report_path.join("manifest.json")
    } else {
        let mut name = report_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "report".to_string());
        name.push_str(".manifest.json");
        report_path.with_file_name(name)
    }
}

/// Serialize a report plus its sibling manifest.
pub fn write_report<T: Serialize>(
    report_path: &Path,
    report: &T,
    seed: u64,
    config_path: Option<&Path>,
    inputs: &[PathBuf],
) -> Result<()> {
    if let Some(parent) = report_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("failed to create {}", parent.display()))?;
        }
    }
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(report_path, json + "\n")
        .with_context(|| format!("failed to write {}", report_path.display()))?;
    let manifest = RunManifest::collect(seed, config_path, inputs)?;
    let manifest_json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(manifest_path(report_path), manifest_json + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn digests_verify_and_detect_changes() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("input.jsonl");
        std::fs::write(&input, b"{\"id\":\"a\"}\n").unwrap();

        let manifest = RunManifest::collect(7, None, std::slice::from_ref(&input)).unwrap();
        assert!(manifest.verify().unwrap());

        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .open(&input)
            .unwrap();
        f.write_all(b"tampered\n").unwrap();
        assert!(!manifest.verify().unwrap());
    }

    #[test]
    fn manifest_path_shapes() {
        assert_eq!(
            manifest_path(Path::new("out/report.json")),
            PathBuf::from("out/report.json.manifest.json")
        );
    }
}
