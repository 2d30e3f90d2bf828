//! The experiment configuration file (TOML).
//!
//! Sections: `data`, `degradation`, `model`, `loss_weights`, `trainer`, `fid`.
//! Every section and key is optional and falls back to its default; unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::datasets::BatchSpec;
use crate::error::{Error, Result};
use crate::imaging::DegradationSpec;
use crate::losses::LossWeights;
use crate::metrics::FidConfig;
use crate::models::{DiscriminatorConfig, FeatureExtractorSpec, GeneratorConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub degradation: DegradationSpec,
    pub model: ModelConfig,
    pub loss_weights: LossWeights,
    pub trainer: TrainConfig,
    pub fid: FidConfig,
}

/// Training images come from a prepared split, or are generated in memory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub synthetic: Option<SyntheticConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_paired: usize,
    pub n_unpaired: usize,
    pub n_validation: usize,
    pub hr_size: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_paired: 32,
            n_unpaired: 96,
            n_validation: 8,
            hr_size: 32,
            channels: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialKind {
    /// `-log D(G(x))` for G and binary cross-entropy for D.
    #[default]
    Standard,
    /// Relativistic average formulation on D's logits.
    Relativistic,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    /// Perceptual-loss feature extractor.
    pub features: FeatureExtractorSpec,
    pub adversarial: AdversarialKind,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Multiplies the learning rate by `gamma` every `every` batches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    pub every: u64,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Batches of L1-only generator training before adversarial training starts.
    pub warmup_batches: u64,
    pub max_batches: u64,
    pub batch: BatchSpec,
    pub seed: u64,
    /// 0 disables periodic checkpoints; the final checkpoint is always written.
    pub checkpoint_every: u64,
    /// 0 disables periodic validation.
    pub validate_every: u64,
    /// Stop after this many validations without improvement (adversarial
    /// stage only); 0 disables early stopping.
    pub early_stop_patience: usize,
    /// Track validation FID (when the validation set has at least two
    /// images) rather than validation L1.
    pub validation_fid: bool,
    pub lr_decay: Option<StepDecay>,
    /// Prefetch threads for batch assembly; 0 builds batches inline.
    pub workers: usize,
    pub precision: Precision,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 2e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            warmup_batches: 500,
            max_batches: 20_000,
            batch: BatchSpec::default(),
            seed: 0,
            checkpoint_every: 1000,
            validate_every: 1000,
            early_stop_patience: 5,
            validation_fid: true,
            lr_decay: None,
            workers: 1,
            precision: Precision::F32,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return Err(Error::Config(format!("lr_init must be > 0, got {}", self.lr_init)));
        }
        if self.warmup_batches > self.max_batches {
            return Err(Error::Config(format!(
                "warmup_batches {} exceeds max_batches {}",
                self.warmup_batches, self.max_batches
            )));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if let Some(d) = self.lr_decay {
            if d.every == 0 || !(d.gamma > 0.0) {
                return Err(Error::Config("lr_decay needs every > 0 and gamma > 0".into()));
            }
        }
        Ok(())
    }

    /// Learning rate used for batch `k`.
    pub fn learning_rate(&self, k: u64) -> f64 {
        match self.lr_decay {
            Some(d) => self.lr_init * d.gamma.powi((k / d.every) as i32),
            None => self.lr_init,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.degradation.validate()?;
        self.model.generator.validate()?;
        self.model.discriminator.validate()?;
        self.model.features.validate()?;
        self.loss_weights.validate()?;
        self.trainer.validate()?;
        if self.model.generator.scale != self.degradation.scale {
            return Err(Error::Config(format!(
                "generator scale {} differs from degradation scale {}",
                self.model.generator.scale, self.degradation.scale
            )));
        }
        if self.data.manifest.is_some() && self.data.synthetic.is_some() {
            return Err(Error::Config(
                "data.manifest and data.synthetic are mutually exclusive".into(),
            ));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&s)?;
        // relative data paths are relative to the config file
        if let (Some(m), Some(dir)) = (&cfg.data.manifest, path.parent()) {
            if m.is_relative() {
                cfg.data.manifest = Some(dir.join(m));
            }
        }
        Ok(cfg)
    }

    /// The fully resolved configuration, every default spelled out.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Model-defining part, stored in checkpoints and compared on resume.
    pub fn model_echo(&self) -> Result<serde_json::Value> {
        Ok(serde_json::json!({
            "model": serde_json::to_value(&self.model)?,
            "degradation": serde_json::to_value(self.degradation)?,
        }))
    }
}
