use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::hash_bytes;
use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    /// Stage hash of the configuration that produced the file.
    pub config_hash: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    /// Unix seconds.
    pub started: u64,
    pub finished: u64,
    pub artifacts: Vec<ArtifactRecord>,
    pub metrics: BTreeMap<String, f64>,
    /// Set when a convergence diagnostic failed.
    #[serde(default)]
    pub flagged: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Headline {
    pub direct_ap: Option<f64>,
    pub mixture_ap: Option<f64>,
    pub fp_ap: Option<f64>,
}

impl Headline {
    pub fn is_empty(&self) -> bool {
        self.direct_ap.is_none() && self.mixture_ap.is_none() && self.fp_ap.is_none()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Hash of the whole resolved configuration of the latest command.
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
    pub headline: Headline,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    /// Loads `<out>/manifest.json`, or an empty manifest if there is none.
    pub fn load_or_default(out: &Path) -> CliResult<Self> {
        let path = out.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        Self::load(&path)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, out: &Path) -> CliResult<()> {
        let path = out.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Other(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }

    pub fn record(&mut self, stage: &str, record: StageRecord) {
        self.stages.insert(stage.to_string(), record);
    }

    /// Every listed artifact exists and still has its recorded checksum.
    pub fn verify(&self, out: &Path) -> CliResult<()> {
        for (stage, rec) in &self.stages {
            for a in &rec.artifacts {
                let path = out.join(&a.path);
                let digest = file_digest(&path)?;
                if digest != a.sha256 {
                    return Err(CliError::Other(format!(
                        "{} (stage {stage}) changed since it was written",
                        path.display()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// SHA-256 of a file, or of a directory as the digest of its sorted
/// `name digest` lines.
pub fn file_digest(path: &Path) -> CliResult<String> {
    if path.is_dir() {
        let mut names: Vec<String> = std::fs::read_dir(path)
            .map_err(|e| CliError::io(path, e))?
            .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::io(path, e))?;
        names.sort();
        let mut listing = String::new();
        for n in names {
            listing.push_str(&format!("{n} {}\n", file_digest(&path.join(&n))?));
        }
        return Ok(hash_bytes(listing.as_bytes()));
    }
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hash_bytes(&bytes))
}
