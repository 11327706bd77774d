//! Run manifests: one `manifest.json` per output directory describing what
//! produced the directory's artifacts.

use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// `checkpoint`, `metrics`, `report`, `image` or `dataset`.
    pub kind: String,
    /// Relative to the output directory when inside it.
    pub path: PathBuf,
}

/// The run that produced a checkpoint this run started from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub checkpoint: PathBuf,
    /// Absent when the checkpoint's directory has no readable manifest.
    pub run_id: Option<String>,
    pub command: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub run_id: String,
    pub command: String,
    pub config: serde_json::Value,
    pub code_revision: String,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: RunStatus,
    pub artifacts: Vec<Artifact>,
    #[serde(default)]
    pub parents: Vec<Lineage>,
    pub error: Option<String>,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// `git describe` of the working tree, or the crate version outside a
/// repository.
pub fn code_revision() -> String {
    let git = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--abbrev=12"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output();
    match git {
        Ok(out) if out.status.success() => {
            let rev = String::from_utf8_lossy(&out.stdout).trim().to_string();
            format!("{rev} (ssldetr {})", env!("CARGO_PKG_VERSION"))
        }
        _ => format!("ssldetr {}", env!("CARGO_PKG_VERSION")),
    }
}

/// Fails with [`LabError::OutputExists`] if `dir` already holds a manifest
/// and `force` is off; creates `dir` otherwise.
pub fn claim_output_dir(dir: &Path, force: bool) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    if path.exists() && !force {
        return Err(LabError::OutputExists(dir.to_path_buf()));
    }
    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))
}

/// Lineage of `checkpoint`, read from the manifest next to it.
pub fn lineage_of(checkpoint: &Path) -> Lineage {
    let parent = checkpoint
        .parent()
        .map(|d| d.join(MANIFEST_FILE))
        .and_then(|p| read_manifest(&p).ok());
    Lineage {
        checkpoint: checkpoint.to_path_buf(),
        run_id: parent.as_ref().map(|m| m.run_id.clone()),
        command: parent.map(|m| m.command),
    }
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| LabError::json(path, e))
}

impl RunManifest {
    pub fn start(command: &str, config: serde_json::Value, seed: u64) -> Self {
        let started_at = now();
        let stamp: String = started_at.chars().filter(char::is_ascii_digit).collect();
        Self {
            manifest_version: MANIFEST_VERSION,
            run_id: format!("{command}-{stamp}-s{seed}-p{}", std::process::id()),
            command: command.to_string(),
            config,
            code_revision: code_revision(),
            seed,
            started_at,
            finished_at: None,
            status: RunStatus::Running,
            artifacts: Vec::new(),
            parents: Vec::new(),
            error: None,
        }
    }

    pub fn add_artifact(&mut self, kind: &str, path: &Path, dir: &Path) {
        let path = path.strip_prefix(dir).unwrap_or(path).to_path_buf();
        if !self.artifacts.iter().any(|a| a.path == path) {
            self.artifacts.push(Artifact {
                kind: kind.to_string(),
                path,
            });
        }
    }

    pub fn finish(&mut self, outcome: std::result::Result<(), &LabError>) {
        self.finished_at = Some(now());
        match outcome {
            Ok(()) => self.status = RunStatus::Completed,
            Err(e) => {
                self.status = RunStatus::Failed;
                self.error = Some(e.to_string());
            }
        }
    }

    /// Writes `dir/manifest.json`, replacing any previous version atomically.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let tmp = dir.join(format!("{MANIFEST_FILE}.partial"));
        let text = serde_json::to_string_pretty(self).map_err(|e| LabError::json(&path, e))?;
        std::fs::write(&tmp, text + "\n").map_err(|e| LabError::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| LabError::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn claim_refuses_existing_manifest_without_force() {
        let dir = tempfile::tempdir().unwrap();
        claim_output_dir(dir.path(), false).unwrap();
        RunManifest::start("train", serde_json::json!({}), 1)
            .write(dir.path())
            .unwrap();
        let err = claim_output_dir(dir.path(), false).unwrap_err();
        assert!(matches!(err, LabError::OutputExists(_)));
        claim_output_dir(dir.path(), true).unwrap();
    }

    #[test]
    fn write_and_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::start("pretrain", serde_json::json!({"seed": 4}), 4);
        m.add_artifact("checkpoint", &dir.path().join("checkpoint.safetensors"), dir.path());
        m.add_artifact("checkpoint", &dir.path().join("checkpoint.safetensors"), dir.path());
        m.finish(Ok(()));
        let path = m.write(dir.path()).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.artifacts.len(), 1);
        assert_eq!(back.artifacts[0].path, PathBuf::from("checkpoint.safetensors"));
        assert_eq!(back.status, RunStatus::Completed);
    }

    #[test]
    fn lineage_reads_parent_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest::start("pretrain", serde_json::json!({}), 0);
        m.write(dir.path()).unwrap();
        let l = lineage_of(&dir.path().join("checkpoint.safetensors"));
        assert_eq!(l.run_id.as_deref(), Some(m.run_id.as_str()));
        assert_eq!(l.command.as_deref(), Some("pretrain"));
        let orphan = lineage_of(Path::new("/nonexistent/ckpt.safetensors"));
        assert_eq!(orphan.run_id, None);
    }
}
