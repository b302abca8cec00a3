use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use ews_core::checkpoint::file_hash;
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the run directory.
    pub path: String,
    pub sha256: String,
}

/// Everything needed to locate, verify and re-run a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    /// Flat config text; training it again reproduces the run.
    pub config: String,
    pub dataset_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub checkpoints: Vec<Artifact>,
    pub metrics: Artifact,
    /// Reports written by later `eval`/`analyze` calls.
    #[serde(default)]
    pub reports: Vec<Artifact>,
}

impl RunManifest {
    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join(MANIFEST_FILE)
    }

    pub fn artifact(run_dir: &Path, relative: &str) -> anyhow::Result<Artifact> {
        Ok(Artifact {
            path: relative.to_string(),
            sha256: file_hash(&run_dir.join(relative))?,
        })
    }

    pub fn save(&self, run_dir: &Path) -> anyhow::Result<()> {
        let path = Self::path(run_dir);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    /// Reads the manifest and checks every referenced file against its hash.
    pub fn load_verified(run_dir: &Path) -> anyhow::Result<Self> {
        let path = Self::path(run_dir);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let manifest: RunManifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        for a in manifest.all_artifacts() {
            let file = run_dir.join(&a.path);
            if !file.exists() {
                bail!("manifest references missing file {}", file.display());
            }
            let actual = file_hash(&file)?;
            if actual != a.sha256 {
                bail!("{} has hash {actual}, manifest records {}", file.display(), a.sha256);
            }
        }
        Ok(manifest)
    }

    pub fn all_artifacts(&self) -> impl Iterator<Item = &Artifact> {
        self.checkpoints.iter().chain(std::iter::once(&self.metrics)).chain(&self.reports)
    }

    /// Re-hashes the metrics log and records (or refreshes) a report file.
    pub fn record(&mut self, run_dir: &Path, report: Option<&str>) -> anyhow::Result<()> {
        self.metrics = Self::artifact(run_dir, &self.metrics.path)?;
        if let Some(rel) = report {
            let a = Self::artifact(run_dir, rel)?;
            match self.reports.iter_mut().find(|r| r.path == rel) {
                Some(existing) => *existing = a,
                None => self.reports.push(a),
            }
        }
        self.save(run_dir)
    }
}
