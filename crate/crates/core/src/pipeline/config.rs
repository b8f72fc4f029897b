use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::PermutationScope;
use crate::encoder::EncoderConfig;
use crate::error::{RaplError, Result};
use crate::synth::SynthConfig;

/// Which vectors the contrastive term contrasts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContrastiveMode {
    /// Views plus old and new proxies.
    Proxy,
    /// Views only.
    Vanilla,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the region-alignment loss.
    pub alpha: f64,
    /// Weight of the proxy classification loss while pre-training.
    pub beta_pretrain: f64,
    /// Weight of the proxy classification loss while discovering.
    pub beta_discover: f64,
    /// Weight of the proxy regularization (pre-training only).
    pub gamma: f64,
    /// Weight of the contrastive loss (discovery only).
    pub delta: f64,
    pub tau: f64,
    /// Fraction of old classes kept as hard negatives.
    pub xi: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub pretrain_epochs: usize,
    pub discover_epochs: usize,
    pub batch_size: usize,
    pub contrastive: ContrastiveMode,
    pub renormalize_new_proxies: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.6,
            beta_pretrain: 2.0,
            beta_discover: 1.0,
            gamma: 1.0,
            delta: 0.8,
            tau: 0.1,
            xi: 0.05,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_epochs: 5,
            pretrain_epochs: 40,
            discover_epochs: 40,
            batch_size: 24,
            contrastive: ContrastiveMode::Proxy,
            renormalize_new_proxies: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("alpha", self.alpha),
            ("beta_pretrain", self.beta_pretrain),
            ("beta_discover", self.beta_discover),
            ("gamma", self.gamma),
            ("delta", self.delta),
            ("lr", self.lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ];
        if let Some((name, v)) = weights.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(RaplError::Config(format!("{name} must be finite and ≥ 0, got {v}")));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(RaplError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.xi > 0.0 && self.xi <= 1.0) {
            return Err(RaplError::Config(format!("xi must lie in (0, 1], got {}", self.xi)));
        }
        if self.batch_size < 2 {
            return Err(RaplError::Config("batch_size must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalFeatures {
    /// Output of the projection head.
    Embedding,
    /// Pooled feature map, before the head.
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub features: EvalFeatures,
    pub scope: PermutationScope,
    pub normalize: bool,
    /// Also evaluate every this many epochs; 0 means phase ends only.
    pub every: usize,
    /// Test samples written to the saliency dump.
    pub saliency_samples: usize,
    pub saliency_top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            features: EvalFeatures::Embedding,
            scope: PermutationScope::Global,
            normalize: true,
            every: 0,
            saliency_samples: 8,
            saliency_top_k: 3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: SynthConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Reads TOML, or JSON when the file ends in `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RaplError::io(path, e))?;
        let cfg: ExperimentConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| RaplError::Format {
                path: path.to_path_buf(),
                detail: e.to_string(),
            })?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses TOML text; missing fields take their defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| RaplError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| RaplError::Config(e.to_string()))
    }

    /// Uses `seed` for data generation, initialization and training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.encoder.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        if self.data.input_dims != self.encoder.input_dims {
            return Err(RaplError::Config(format!(
                "data produces {:?} inputs but the encoder expects {:?}",
                self.data.input_dims, self.encoder.input_dims
            )));
        }
        if self.eval.saliency_top_k == 0 {
            return Err(RaplError::Config("saliency_top_k must be positive".into()));
        }
        Ok(())
    }
}
