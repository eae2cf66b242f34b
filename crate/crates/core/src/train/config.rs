use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frequency::DEFAULT_ALPHA;
use crate::mpsm::DEFAULT_K;
use crate::net::{ModelConfig, Variant, DEFAULT_IMAGE_SIZE, DEFAULT_WIDTHS};
use crate::objective::{LossWeights, DEFAULT_LAMBDA_SEG, DEFAULT_LAMBDA_SIM};
use crate::supervision::DEFAULT_MASK_THRESHOLD;

/// Every hyperparameter of a training run. Missing TOML keys take the defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub k: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_halving_period: usize,
    pub seed: u64,
    pub image_size: usize,
    pub mask_threshold: f64,
    pub widths: [usize; 3],
    pub variant: Variant,
    /// Samples generated when no corpus directory is given.
    pub corpus_size: usize,
    /// Divide the segmentation loss by the pixel count.
    pub normalize_seg: bool,
    /// Compute frequency cues once up front instead of per batch.
    pub cache_cue: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            k: DEFAULT_K,
            lambda1: DEFAULT_LAMBDA_SIM,
            lambda2: DEFAULT_LAMBDA_SEG,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-5,
            batch_size: 16,
            epochs: 20,
            lr_halving_period: 10,
            seed: 42,
            image_size: DEFAULT_IMAGE_SIZE,
            mask_threshold: DEFAULT_MASK_THRESHOLD,
            widths: DEFAULT_WIDTHS,
            variant: Variant::Full,
            corpus_size: 2000,
            normalize_seg: true,
            cache_cue: false,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.lr > 0.0 && self.adam_eps > 0.0 && self.weight_decay >= 0.0) {
            return bad("lr and adam_eps must be positive, weight_decay non-negative");
        }
        if self.batch_size < 2 || self.epochs == 0 || self.lr_halving_period == 0 {
            return bad("batch_size must be at least 2; epochs and lr_halving_period positive");
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return bad("mask_threshold must lie in (0, 1)");
        }
        if self.corpus_size < 10 {
            return bad("corpus_size must be at least 10");
        }
        LossWeights::new(self.lambda1, self.lambda2)?;
        self.model().validate()
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            k: self.k,
            widths: self.widths,
            variant: self.variant,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights::new(self.lambda1, self.lambda2).expect("validated weights")
    }

    /// Learning rate for 0-based `epoch`: halved every `lr_halving_period` epochs.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * 0.5f64.powi((epoch / self.lr_halving_period) as i32)
    }
}
