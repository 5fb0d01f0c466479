//! Versioned run configuration covering every module's tunables.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::AlignConfig;
use crate::error::{Error, Result};
use crate::rerank::{JudgeConfig, RewardConfig};
use crate::seqmodel::{ModelConfig, TrainConfig};
use crate::synthworld::WorldConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Beam,
    Pool,
    /// Retrieval baseline: spherical mean of the top-k neighbours.
    Knn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SelectorKind {
    Logprob,
    Reward,
    Similarity,
    Judge,
    Ideal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictConfig {
    pub mode: DecodeMode,
    pub beam_width: usize,
    /// Candidate pool size K.
    pub pool_size: usize,
    pub temperature: f64,
    pub selector: SelectorKind,
    pub seed: u64,
    /// Neighbours averaged by the kNN baseline.
    pub knn_k: usize,
    /// Gaussian weighting of kNN neighbours by embedding distance.
    pub knn_sigma: Option<f64>,
    /// Writes every candidate pool as JSON Lines next to the predictions.
    pub dump_pools: bool,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            beam_width: 5,
            pool_size: 30,
            temperature: 0.7,
            selector: SelectorKind::Logprob,
            seed: 31,
            knn_k: 5,
            knn_sigma: None,
            dump_pools: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub pool_sizes: Vec<usize>,
    pub temperatures: Vec<f64>,
    /// Test queries evaluated (0 = all).
    pub max_queries: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            pool_sizes: vec![5, 10, 15, 20, 30],
            temperatures: vec![0.2, 0.5, 0.7, 1.2],
            max_queries: 0,
            seed: 37,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub align: AlignConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub predict: PredictConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default)]
    pub judge: JudgeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            version: CONFIG_VERSION,
            world: WorldConfig::default(),
            align: AlignConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            predict: PredictConfig::default(),
            sweep: SweepConfig::default(),
            reward: RewardConfig::default(),
            judge: JudgeConfig::default(),
        };
        cfg.sync();
        cfg
    }
}

impl RunConfig {
    /// Parses and validates a TOML document; unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Derived dimensions that must agree across modules.
    fn sync(&mut self) {
        self.align.raw_dim = self.world.feature_dim;
        self.model.input_dim = self.align.image_dim();
        self.model.metadata_dim = self.align.proj_dim;
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        self.world.validate().map_err(cfg_err)?;
        self.model.validate().map_err(cfg_err)?;
        let seeds = [
            self.world.seed,
            self.align.seed,
            self.model.seed,
            self.train.seed,
            self.predict.seed,
            self.sweep.seed,
            self.reward.seed,
        ];
        if seeds.iter().any(|&s| s > i64::MAX as u64) {
            return Err(Error::Config("seeds must fit in a signed 64-bit TOML integer".into()));
        }
        if self.predict.pool_size == 0 || self.predict.beam_width == 0 || self.predict.knn_k == 0 {
            return Err(Error::Config(
                "pool_size, beam_width and knn_k must be at least 1".into(),
            ));
        }
        if self.predict.temperature.is_nan() || self.predict.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        let k = &self.sweep.pool_sizes;
        if k.is_empty() || k[0] == 0 || k.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "sweep pool sizes must be positive and strictly increasing".into(),
            ));
        }
        if self.sweep.temperatures.is_empty() || self.sweep.temperatures.iter().any(|&t| t.is_nan() || t <= 0.0) {
            return Err(Error::Config("sweep needs positive temperatures".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the resolved TOML document.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document_resolves_defaults() {
        let cfg = RunConfig::from_toml("version = 1\n").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.model.input_dim, 128);
        let again = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again.hash(), cfg.hash());
    }

    #[test]
    fn rejects_unknown_keys_and_versions() {
        assert!(matches!(
            RunConfig::from_toml("version = 1\nfoo = 2\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("version = 1\n[model]\nd_modl = 3\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(RunConfig::from_toml("version = 2\n"), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_toml("version = 1\n[model]\nd_model = 30\nn_heads = 4\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.predict.temperature = 0.5;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
