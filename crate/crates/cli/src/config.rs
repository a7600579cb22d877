use std::path::{Path, PathBuf};

use latent_scope::dataset::SyntheticConfig;
use latent_scope::direct_eval::{Aggregation, LatentVector};
use latent_scope::future::FpConfig;
use latent_scope::mixture::ChainConfig;
use latent_scope::rng::derive_seed;
use latent_scope::vae::VaeConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Where frames come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    /// Rendered by `synth` into `<out>/data`.
    Synthetic(SyntheticConfig),
    /// A directory of PNG frames plus an optional `filename,label` CSV
    /// used only by the evaluation commands.
    Directory {
        path: PathBuf,
        #[serde(default)]
        labels: Option<PathBuf>,
    },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DirectStage {
    pub vector: LatentVector,
    pub aggregation: Aggregation,
}

impl Default for DirectStage {
    fn default() -> Self {
        DirectStage {
            vector: LatentVector::Sample,
            aggregation: Aggregation::MeanOfQueries,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureStage {
    pub sampler: ChainConfig,
    /// Leading share of test frames used to decide which cluster means "tool".
    pub calibration_fraction: f64,
    pub vector: LatentVector,
}

impl Default for MixtureStage {
    fn default() -> Self {
        MixtureStage {
            sampler: ChainConfig::default(),
            calibration_fraction: 0.2,
            vector: LatentVector::Sample,
        }
    }
}

/// One JSON document describing a whole run. Stage `seed` fields are
/// ignored on input and replaced by seeds derived from the global `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetSource,
    pub test_fraction: f64,
    pub out: Option<PathBuf>,
    pub vae: VaeConfig,
    pub direct: DirectStage,
    pub mixture: MixtureStage,
    pub fp: FpConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: DatasetSource::default(),
            test_fraction: 0.2,
            out: None,
            vae: VaeConfig::default(),
            direct: DirectStage::default(),
            mixture: MixtureStage::default(),
            fp: FpConfig {
                // test frames are every fifth frame, so test windows step by 5
                max_index_step: 5,
                ..FpConfig::default()
            },
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `key=value` edits to dotted paths, e.g. `vae.epochs=40` or
    /// `dataset.frames=100`. Values parse as JSON, falling back to a string.
    pub fn with_overrides(self, sets: &[String]) -> CliResult<Self> {
        if sets.is_empty() {
            return Ok(self);
        }
        let mut doc = serde_json::to_value(&self).map_err(|e| CliError::Config(e.to_string()))?;
        for set in sets {
            let (key, raw) = set
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{set}`")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut node = &mut doc;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let obj = node
                    .as_object_mut()
                    .ok_or_else(|| CliError::Config(format!("`{key}`: `{part}` is not inside an object")))?;
                if i + 1 == parts.len() {
                    obj.insert((*part).to_string(), value.clone());
                    break;
                }
                node = obj
                    .get_mut(*part)
                    .ok_or_else(|| CliError::Config(format!("unknown config key `{key}`")))?;
            }
        }
        serde_json::from_value(doc).map_err(|e| CliError::Config(format!("after --set: {e}")))
    }

    /// Writes derived stage seeds and checks every section.
    pub fn resolve(mut self) -> CliResult<Self> {
        let s = self.seed;
        if let DatasetSource::Synthetic(c) = &mut self.dataset {
            c.seed = derive_seed(s, "synthetic", 0);
        }
        self.vae.seed = derive_seed(s, "vae", 0);
        self.mixture.sampler.seed = derive_seed(s, "mixture", 0);
        self.fp.seed = derive_seed(s, "fp", 0);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> CliResult<()> {
        match &self.dataset {
            DatasetSource::Synthetic(c) => c.validate()?,
            DatasetSource::Directory { path, labels } => {
                if !path.is_dir() {
                    return Err(CliError::Config(format!("frame directory {} does not exist", path.display())));
                }
                if let Some(l) = labels {
                    if !l.is_file() {
                        return Err(CliError::Config(format!("labels file {} does not exist", l.display())));
                    }
                }
            }
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(CliError::Config("test_fraction must lie in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.mixture.calibration_fraction) {
            return Err(CliError::Config("mixture.calibration_fraction must lie in [0, 1)".into()));
        }
        self.vae.validate()?;
        self.mixture.sampler.validate()?;
        self.fp.validate()?;
        Ok(())
    }

    /// Seed for drawing the latent sample of each encoded frame.
    pub fn encode_seed(&self) -> u64 {
        derive_seed(self.seed, "encode", 0)
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, "split", 0)
    }

    pub fn hashes(&self) -> StageHashes {
        let data = hash_value(&serde_json::json!({
            "seed": self.seed,
            "dataset": self.dataset,
            "test_fraction": self.test_fraction,
        }));
        let vae = hash_value(&serde_json::json!({ "upstream": data, "vae": self.vae }));
        let encode = hash_value(&serde_json::json!({ "upstream": vae, "encode_seed": self.encode_seed() }));
        let direct = hash_value(&serde_json::json!({ "upstream": encode, "direct": self.direct }));
        let mixture = hash_value(&serde_json::json!({ "upstream": encode, "mixture": self.mixture }));
        let fp = hash_value(&serde_json::json!({ "upstream": encode, "fp": self.fp }));
        let mut full = self.clone();
        full.out = None;
        StageHashes {
            full: hash_value(&serde_json::to_value(&full).expect("config serializes")),
            data,
            vae,
            encode,
            direct,
            mixture,
            fp,
        }
    }
}

/// Chained config hashes: each stage folds in the hash of its input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageHashes {
    pub full: String,
    pub data: String,
    pub vae: String,
    pub encode: String,
    pub direct: String,
    pub mixture: String,
    pub fp: String,
}

/// SHA-256 of the compact JSON rendering. Object keys come out sorted.
pub fn hash_value(v: &Value) -> String {
    let bytes = serde_json::to_vec(v).expect("json value serializes");
    hex::encode(Sha256::digest(&bytes))
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let text = serde_json::to_string_pretty(&c).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.vae.epochs, 80);
        assert_eq!(back.fp.epochs, 1000);
        assert_eq!(back.mixture.sampler.burn_in, 2500);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 3, "vae": {"epochs": 2}}"#).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.vae.epochs, 2);
        assert_eq!(c.vae.latent_dim, 20);
        assert!(matches!(c.dataset, DatasetSource::Synthetic(_)));
    }

    #[test]
    fn directory_source_parses() {
        let c: RunConfig =
            serde_json::from_str(r#"{"dataset": {"source": "directory", "path": "/x", "labels": "/y.csv"}}"#).unwrap();
        assert_eq!(
            c.dataset,
            DatasetSource::Directory {
                path: "/x".into(),
                labels: Some("/y.csv".into())
            }
        );
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"vae": {"epoch": 2}}"#).is_err());
        let err = RunConfig::default().with_overrides(&["vae.nope.x=1".into()]);
        assert!(err.is_err());
    }

    #[test]
    fn overrides_edit_nested_values() {
        let c = RunConfig::default()
            .with_overrides(&[
                "vae.epochs=40".into(),
                "dataset.frames=100".into(),
                "direct.vector=mean".into(),
                "mixture.sampler.burn_in=10".into(),
            ])
            .unwrap();
        assert_eq!(c.vae.epochs, 40);
        assert_eq!(c.mixture.sampler.burn_in, 10);
        assert_eq!(c.direct.vector, LatentVector::Mean);
        match c.dataset {
            DatasetSource::Synthetic(s) => assert_eq!(s.frames, 100),
            _ => panic!("source changed"),
        }
    }

    #[test]
    fn seeds_propagate_from_the_global_seed() {
        let a = RunConfig { seed: 1, ..Default::default() }.resolve().unwrap();
        let b = RunConfig { seed: 2, ..Default::default() }.resolve().unwrap();
        assert_ne!(a.vae.seed, b.vae.seed);
        assert_ne!(a.fp.seed, b.fp.seed);
        assert_eq!(a, RunConfig { seed: 1, ..Default::default() }.resolve().unwrap());
        // a stage seed given by hand is replaced
        let mut c = RunConfig { seed: 1, ..Default::default() };
        c.vae.seed = 99;
        assert_eq!(c.resolve().unwrap().vae.seed, a.vae.seed);
    }

    #[test]
    fn hash_chain_isolates_stages() {
        let a = RunConfig::default().resolve().unwrap();
        let mut b = a.clone();
        b.fp.epochs = 7;
        let (ha, hb) = (a.hashes(), b.hashes());
        assert_eq!(ha.encode, hb.encode);
        assert_eq!(ha.mixture, hb.mixture);
        assert_ne!(ha.fp, hb.fp);
        assert_ne!(ha.full, hb.full);
        let mut c = a.clone();
        c.vae.epochs = 7;
        let hc = c.hashes();
        assert_eq!(ha.data, hc.data);
        assert_ne!(ha.encode, hc.encode);
        assert_ne!(ha.direct, hc.direct);
    }

    #[test]
    fn output_directory_does_not_change_hashes() {
        let a = RunConfig::default();
        let b = RunConfig {
            out: Some("elsewhere".into()),
            ..Default::default()
        };
        assert_eq!(a.hashes(), b.hashes());
    }

    #[test]
    fn hash_is_sha256_hex() {
        assert_eq!(
            hash_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
