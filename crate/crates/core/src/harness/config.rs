//! Experiment configuration: a TOML file tagged `schema = "cfg-v1"`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::interference::InterferenceConfig;
use crate::moe::MoEConfig;

pub const SCHEMA_TAG: &str = "cfg-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip_norm: f64,
    pub label_smoothing: f64,
    pub steps: usize,
    pub seed: u64,
    /// Tasks sampled and accumulated per update.
    pub tasks_per_step: usize,
    pub temperature_init: f64,
    /// Per-task loss weights; empty means all ones.
    pub loss_weights: Vec<f64>,
    /// Per-task sampling weights; empty means the square root of dataset size.
    pub sampling_weights: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            grad_clip_norm: 0.5,
            label_smoothing: 0.1,
            steps: 1000,
            seed: 0,
            tasks_per_step: 1,
            temperature_init: 0.1,
            loss_weights: Vec::new(),
            sampling_weights: Vec::new(),
        }
    }
}

/// Whether the two classification tasks agree on their label mapping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteVariant {
    Conflicting,
    Cooperative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub variant: SuiteVariant,
    pub num_patterns: usize,
    pub code_len: usize,
    pub vocab: usize,
    /// Std of the Gaussian noise added to image-token embeddings.
    pub image_noise: f64,
    /// Training examples per task, in task order.
    pub dataset_sizes: Vec<usize>,
    pub batch_size: usize,
    /// Held-out batches per task used for evaluation.
    pub eval_batches: usize,
    /// Seeds the pattern codes, independent of the training seed.
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            variant: SuiteVariant::Conflicting,
            num_patterns: 8,
            code_len: 4,
            vocab: 16,
            image_noise: 0.3,
            dataset_sizes: vec![400, 400, 400],
            batch_size: 8,
            eval_batches: 4,
            seed: 17,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema: String,
    #[serde(default)]
    pub model: EncoderConfig,
    #[serde(default)]
    pub moe: MoEConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub suite: SuiteConfig,
    #[serde(default)]
    pub interference: InterferenceConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            schema: SCHEMA_TAG.to_string(),
            model: EncoderConfig::default(),
            moe: MoEConfig::default(),
            train: TrainConfig::default(),
            suite: SuiteConfig::default(),
            interference: InterferenceConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn num_tasks(&self) -> usize {
        self.suite.dataset_sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("{field}: {why}")));
        if self.schema != SCHEMA_TAG {
            return bad("schema", &format!("expected \"{SCHEMA_TAG}\", found \"{}\"", self.schema));
        }
        self.model.validate().map_err(|e| Error::Config(format!("model: {e}")))?;
        self.moe.validate().map_err(|e| Error::Config(format!("moe: {e}")))?;
        self.interference
            .validate()
            .map_err(|e| Error::Config(format!("interference: {e}")))?;
        let t = &self.train;
        for (name, v) in [
            ("train.lr", t.lr),
            ("train.beta1", t.beta1),
            ("train.beta2", t.beta2),
            ("train.eps", t.eps),
            ("train.grad_clip_norm", t.grad_clip_norm),
            ("train.temperature_init", t.temperature_init),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(name, "must be a finite non-negative number");
            }
        }
        if !(t.weight_decay >= 0.0) {
            return bad("train.weight_decay", "must be non-negative");
        }
        if !(t.beta1 < 1.0 && t.beta2 < 1.0) {
            return bad("train.beta1/beta2", "must be below 1");
        }
        if !(0.0..1.0).contains(&t.label_smoothing) {
            return bad("train.label_smoothing", "must lie in [0, 1)");
        }
        if t.tasks_per_step == 0 {
            return bad("train.tasks_per_step", "must be at least 1");
        }
        let n = self.num_tasks();
        let s = &self.suite;
        if n != 3 {
            return bad("suite.dataset_sizes", "the synthetic suite has exactly 3 tasks");
        }
        if s.dataset_sizes.contains(&0) {
            return bad("suite.dataset_sizes", "sizes must be positive");
        }
        if !t.loss_weights.is_empty() && (t.loss_weights.len() != n || t.loss_weights.iter().any(|w| !(*w > 0.0))) {
            return bad("train.loss_weights", "needs one positive weight per task");
        }
        if !t.sampling_weights.is_empty() && t.sampling_weights.len() != n {
            return bad("train.sampling_weights", "needs one weight per task");
        }
        if s.num_patterns < 2 || s.code_len < 2 || s.batch_size == 0 || s.eval_batches == 0 {
            return bad("suite", "needs num_patterns >= 2, code_len >= 2, batch_size >= 1, eval_batches >= 1");
        }
        if s.vocab < s.code_len {
            return bad("suite.vocab", "must be at least code_len");
        }
        if !(s.image_noise >= 0.0) {
            return bad("suite.image_noise", "must be non-negative");
        }
        Ok(())
    }
}
