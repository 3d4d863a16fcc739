//! Run configuration: a nested TOML file whose values individual CLI flags
//! can override. Every section has working defaults, so a bare invocation on
//! a synthetic dataset runs end to end.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use tactile_fusion::features::FeatureParams;
use tactile_fusion::frame::ImageVariant;
use tactile_fusion::neural::ModelConfig;
use tactile_fusion::trainer::TrainParams;

/// Environment variable overriding `[data].root`.
pub const DATA_ROOT_ENV: &str = "TACTILE_FUSION_DATA";

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct AppConfig {
    pub data: DataConfig,
    pub features: FeatureParams,
    pub model: ModelConfig,
    pub train: TrainParams,
    pub synth: SynthConfig,
    pub noise: NoiseConfig,
    pub properties: PropertiesConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub root: PathBuf,
    pub train_tags: Vec<String>,
    pub test_tags: Vec<String>,
    /// Sequence length used when partitioning trials.
    pub seq_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: PathBuf::from("data"),
            train_tags: vec!["day1".into(), "day2".into()],
            test_tags: vec!["day3".into()],
            seq_len: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthProfile {
    /// Classes separated in every modality.
    Separated,
    /// Audio far apart, flow/proprioception nearly identical.
    AudioDominant,
    /// Property levels mapped to disjoint signature-parameter bands.
    PropertyLattice,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub profile: SynthProfile,
    pub classes: usize,
    pub train_trials: usize,
    pub test_trials: usize,
    pub samples_per_trial: usize,
    pub image_variant: ImageVariant,
    pub base_seed: u64,
    /// Inter-class separation multiplier for the separated profile.
    pub margin: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            profile: SynthProfile::Separated,
            classes: 8,
            train_trials: 12,
            test_trials: 2,
            samples_per_trial: 200,
            image_variant: ImageVariant::Small,
            base_seed: 7,
            margin: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Target level of injected noise above the clean ambient floor.
    pub db_above_ambient: f64,
    pub noise_seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { db_above_ambient: 20.0, noise_seed: 424_242 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PropertiesConfig {
    /// Fabric ids excluded from property training and evaluated as holdout.
    pub holdout_fabrics: Vec<u16>,
}

impl Default for PropertiesConfig {
    fn default() -> Self {
        PropertiesConfig { holdout_fabrics: vec![1, 10, 21, 22, 23] }
    }
}

impl AppConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let raw = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                let cfg: AppConfig = toml::from_str(&raw)
                    .with_context(|| format!("parsing config {}", p.display()))?;
                Ok(cfg)
            }
            None => Ok(AppConfig::default()),
        }
    }

    /// Effective data root: flag beats env beats config file.
    pub fn data_root(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Ok(env) = std::env::var(DATA_ROOT_ENV) {
            if !env.is_empty() {
                return PathBuf::from(env);
            }
        }
        self.data.root.clone()
    }

    /// Stable hash of the effective configuration, recorded in run manifests.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&json);
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect::<String>()[..16].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_roundtrips_through_toml() {
        let cfg = AppConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: AppConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.data.seq_len, 200);
        assert_eq!(back.synth.classes, 8);
        assert_eq!(cfg.content_hash(), back.content_hash());
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg: AppConfig = toml::from_str(
            r#"
            [data]
            seq_len = 20
            [synth]
            classes = 2
            "#,
        )
        .unwrap();
        assert_eq!(cfg.data.seq_len, 20);
        assert_eq!(cfg.synth.classes, 2);
        assert_eq!(cfg.synth.train_trials, 12);
        assert_eq!(cfg.train.batch_size, 16);
    }
}
