use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ossl_core::data::sha256_hex;
use ossl_core::pipeline::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::source::DataSource;
use crate::{CliError, CliResult};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const CONFIG: &str = "config.json";
pub const PRETRAINED: &str = "pretrained.ckpt";
pub const FINETUNED: &str = "finetuned.ckpt";
pub const JOINT_SPACE: &str = "jointspace.json";
pub const LOSSES: &str = "losses.csv";
pub const METRICS: &str = "metrics.json";
pub const EVENTS: &str = "events.log";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    /// Dataset directory; relative paths are resolved against the run directory.
    pub dir: PathBuf,
    /// Digest over the three split checksums.
    pub checksum: String,
    pub source: DataSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Path relative to the run directory.
    pub path: String,
    pub sha256: String,
}

/// Everything needed to re-execute and verify a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: TrainConfig,
    pub dataset: DatasetRecord,
    pub artifacts: BTreeMap<String, ArtifactRecord>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(config: TrainConfig, dataset: DatasetRecord) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            dataset,
            artifacts: BTreeMap::new(),
            timings: BTreeMap::new(),
        }
    }

    pub fn load(run: &Path) -> CliResult<Self> {
        let path = run.join(RUN_MANIFEST);
        let raw = fs::read(&path).map_err(|e| {
            CliError::artifact(format!("{}: {e} (has this run been pre-trained?)", path.display()))
        })?;
        serde_json::from_slice(&raw).map_err(|e| CliError::artifact(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, run: &Path) -> CliResult<()> {
        fs::write(run.join(RUN_MANIFEST), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn dataset_dir(&self, run: &Path) -> PathBuf {
        if self.dataset.dir.is_absolute() {
            self.dataset.dir.clone()
        } else {
            run.join(&self.dataset.dir)
        }
    }

    /// Hashes `name` inside `run` and records it.
    pub fn record(&mut self, run: &Path, name: &str) -> CliResult<()> {
        let bytes = fs::read(run.join(name))?;
        self.artifacts.insert(
            name.to_string(),
            ArtifactRecord {
                path: name.to_string(),
                sha256: sha256_hex(&bytes),
            },
        );
        Ok(())
    }

    /// Path of a recorded artifact after checking it exists and is unmodified.
    pub fn verified(&self, run: &Path, name: &str) -> CliResult<PathBuf> {
        let rec = self
            .artifacts
            .get(name)
            .ok_or_else(|| CliError::artifact(format!("{name} is not recorded in {}", run.join(RUN_MANIFEST).display())))?;
        let path = run.join(&rec.path);
        let bytes = fs::read(&path).map_err(|e| CliError::artifact(format!("{}: {e}", path.display())))?;
        if sha256_hex(&bytes) != rec.sha256 {
            return Err(CliError::artifact(format!("{}: checksum mismatch", path.display())));
        }
        Ok(path)
    }

    /// Drops the given artifact records.
    pub fn forget(&mut self, names: &[&str]) {
        for n in names {
            self.artifacts.remove(*n);
        }
    }
}
