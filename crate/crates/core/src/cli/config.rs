//! Run configuration: one JSON document, defaults filled, unknown keys
//! rejected, validation errors reported with key paths.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::evaluation::{default_bins, ThresholdBin};
use crate::mining::{MiningConfig, MiningError};
use crate::model::{ModelError, NetworkConfig};
use crate::retrieval::RetrievalOptions;
use crate::synthworld::DatasetConfig;
use crate::training::{TrainConfig, TrainError};

#[derive(Debug, thiserror::Error)]
#[error("config `{path}`: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    fn at(path: impl Into<String>, message: impl std::fmt::Display) -> Self {
        Self {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub bins: Vec<ThresholdBin>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { bins: default_bins() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    #[serde(rename = "N_S")]
    pub specific_blocks: Vec<usize>,
    pub multiscale: Vec<bool>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            specific_blocks: vec![0, 2, 3, 4],
            multiscale: vec![false, true],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub network: NetworkConfig,
    pub mining: MiningConfig,
    pub training: TrainConfig,
    pub retrieval: RetrievalOptions,
    pub evaluation: EvaluationConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("run"),
            dataset: DatasetConfig::default(),
            network: NetworkConfig::default(),
            mining: MiningConfig::default(),
            training: TrainConfig::default(),
            retrieval: RetrievalOptions::default(),
            evaluation: EvaluationConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

fn model_err(section: &str, e: ModelError) -> ConfigError {
    match e {
        ModelError::InvalidConfig { field, message } => ConfigError::at(format!("{section}.{field}"), message),
        ModelError::UnmappedCondition(c) => {
            ConfigError::at(format!("{section}.branch_map"), format!("condition `{c}` has no branch"))
        }
        other => ConfigError::at(section, other),
    }
}

impl RunConfig {
    /// Parses JSON text, naming the key path of any unknown key or
    /// ill-typed value, then validates.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::at(if path == "." { "(root)".into() } else { path }, e.into_inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::at("(file)", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.dataset
            .validate()
            .map_err(|e| ConfigError::at("dataset", e))?;
        self.network.validate().map_err(|e| model_err("network", e))?;
        let names: Vec<String> = self.dataset.conditions.names().map(str::to_string).collect();
        self.network.check_covers(&names).map_err(|e| model_err("network", e))?;
        self.mining.validate().map_err(|e| match e {
            MiningError::InvalidConfig { field, message } => ConfigError::at(format!("mining.{field}"), message),
            other => ConfigError::at("mining", other),
        })?;
        if self.mining.reference_resample_count > self.dataset.reference_count {
            return Err(ConfigError::at(
                "mining.reference_resample_count",
                format!("exceeds dataset.reference_count = {}", self.dataset.reference_count),
            ));
        }
        self.training.validate().map_err(|e| match e {
            TrainError::InvalidConfig { field, message } => ConfigError::at(format!("training.{field}"), message),
            other => ConfigError::at("training", other),
        })?;
        self.retrieval
            .validate()
            .map_err(|e| ConfigError::at("retrieval", e))?;
        let min = self.network.min_input_size() as f64;
        let smallest = self.retrieval.active_scales().iter().copied().fold(f64::INFINITY, f64::min);
        if (self.dataset.resolution as f64 * smallest).round() < min {
            return Err(ConfigError::at(
                "retrieval.scales",
                format!("scale {smallest} shrinks {0}×{0} inputs below {min}×{min}", self.dataset.resolution),
            ));
        }
        if self.evaluation.bins.is_empty()
            || self
                .evaluation
                .bins
                .iter()
                .any(|b| !(b.t_m >= 0.0 && b.r_deg >= 0.0))
        {
            return Err(ConfigError::at(
                "evaluation.bins",
                "need at least one bin with non-negative thresholds",
            ));
        }
        if let Some(n) = self
            .ablation
            .specific_blocks
            .iter()
            .find(|n| **n > self.network.num_blocks())
        {
            return Err(ConfigError::at(
                "ablation.N_S",
                format!("{n} exceeds the block count {}", self.network.num_blocks()),
            ));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of everything except the output
    /// directory.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
        }
        let canonical = serde_json::to_string(&v).expect("value serializes");
        Sha256::digest(canonical.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn specific_blocks_above_block_count_names_the_key() {
        let err = RunConfig::from_json(r#"{"network": {"N_S": 5}}"#).unwrap_err();
        assert_eq!(err.path, "network.N_S");
        assert!(err.to_string().contains("N_S"));
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let err = RunConfig::from_json(r#"{"mining": {"t_x": 1}}"#).unwrap_err();
        assert_eq!(err.path, "mining.t_x");
        let err = RunConfig::from_json(r#"{"training": {"epochs": "many"}}"#).unwrap_err();
        assert_eq!(err.path, "training.epochs");
        let err = RunConfig::from_json(r#"{"training": {"epochs": 0}}"#).unwrap_err();
        assert_eq!(err.path, "training.epochs");
    }

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::default();
        cfg.seed = 9;
        cfg.network.specific_blocks = 2;
        cfg.mining.t_i = 0.55;
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(RunConfig::from_json(&back.to_json()).unwrap(), back);
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
