//! JSON run configuration. Unknown keys are rejected; missing keys take
//! the full-scale defaults, and [`Config::toy`] gives a desk-scale setup.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DanceError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Cln,
    Mt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Toggle {
    On,
    Off,
}

impl Toggle {
    pub fn is_on(self) -> bool {
        self == Toggle::On
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Unpaired,
    Paired,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ffn: usize,
    /// Prediction horizon.
    pub n: usize,
    /// Long-history window length.
    pub m: usize,
    pub w_ctx: usize,
    pub w_style: usize,
    /// MAG is applied after the block with this zero-based index.
    pub mag_layer: usize,
    pub mag_beta: f64,
    pub tta_cap: usize,
    pub fusion: Fusion,
    pub long_history: Toggle,
    pub style_layers: usize,
    pub dropout: f64,
    pub residual_head: bool,
    pub joints: usize,
    pub fps: u32,
    /// Kernel width of the single-layer history CNNs.
    pub history_kernel: usize,
    /// Frames of generated history kept during rollout.
    pub history_max: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 12,
            heads: 10,
            d_model: 640,
            ffn: 1920,
            n: 7,
            m: 10,
            w_ctx: 40,
            w_style: 40,
            mag_layer: 2,
            mag_beta: 1.0,
            tta_cap: 40,
            fusion: Fusion::Cln,
            long_history: Toggle::On,
            style_layers: 3,
            dropout: 0.1,
            residual_head: false,
            joints: 24,
            fps: 20,
            history_kernel: 3,
            history_max: 1200,
        }
    }
}

impl ModelConfig {
    pub fn motion_dim(&self) -> usize {
        crate::motion::motion_dim(self.joints)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(DanceError::Config(m));
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.ffn == 0 {
            return err("layers, heads, d_model and ffn must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return err(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.mag_layer >= self.layers {
            return err(format!("mag_layer {} must be below layers {}", self.mag_layer, self.layers));
        }
        if self.n == 0 || self.m == 0 || self.w_ctx == 0 || self.w_style == 0 {
            return err("n, m, w_ctx and w_style must be positive".into());
        }
        if self.history_kernel.is_multiple_of(2) {
            return err("history_kernel must be odd".into());
        }
        if !(self.mag_beta > 0.0) || !(0.0..1.0).contains(&self.dropout) {
            return err("mag_beta must be positive and dropout in [0, 1)".into());
        }
        if self.joints == 0 || self.fps == 0 || self.tta_cap == 0 {
            return err("joints, fps and tta_cap must be positive".into());
        }
        if self.history_max < 2 * self.m + self.n {
            return err(format!("history_max must be at least 2m + n = {}", 2 * self.m + self.n));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Steps at which the learning rate drops by a factor of ten.
    pub decay_steps: Vec<u64>,
    pub batch: usize,
    pub iters: u64,
    pub lambda_rec: f64,
    pub lambda_foot: f64,
    pub lambda_trip: f64,
    pub margin: f64,
    pub scheme: Scheme,
    pub seed: u64,
    /// Triplets per step for the style loss.
    pub triplet_batch: usize,
    /// Length of the sampled long-history segment.
    pub history_len: usize,
    pub checkpoint_every: u64,
    pub mirror: bool,
    /// Foot speed (units per frame) below which a foot is in contact.
    pub contact_threshold: f64,
    /// Gradient norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            decay_steps: vec![35_000, 60_000],
            batch: 128,
            iters: 100_000,
            lambda_rec: 1.0,
            lambda_foot: 0.1,
            lambda_trip: 0.1,
            margin: 0.2,
            scheme: Scheme::Unpaired,
            seed: 0,
            triplet_batch: 4,
            history_len: 120,
            checkpoint_every: 1000,
            mirror: true,
            contact_threshold: 0.05,
            clip_norm: 0.0,
        }
    }
}

impl TrainConfig {
    /// `lr * 10^-k` where `k` counts decay boundaries at or before `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let k = self.decay_steps.iter().filter(|&&b| step >= b).count();
        self.lr * 10f64.powi(-(k as i32))
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(DanceError::Config(m.into()));
        if !(self.lr > 0.0) {
            return err("lr must be positive");
        }
        if self.batch == 0 {
            return err("batch must be positive");
        }
        if [self.lambda_rec, self.lambda_foot, self.lambda_trip, self.margin]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return err("loss weights and margin must be finite and non-negative");
        }
        if self.decay_steps.windows(2).any(|w| w[0] > w[1]) {
            return err("decay_steps must be sorted");
        }
        if !(self.clip_norm >= 0.0) {
            return err("clip_norm must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Config {
    /// Two-layer, 64-wide model with short schedules for CPU runs.
    pub fn toy() -> Config {
        Config {
            model: ModelConfig {
                layers: 2,
                heads: 4,
                d_model: 64,
                ffn: 128,
                mag_layer: 1,
                style_layers: 1,
                dropout: 0.0,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                lr: 1e-3,
                decay_steps: vec![1500, 1800],
                batch: 4,
                iters: 2000,
                history_len: 60,
                triplet_batch: 2,
                checkpoint_every: 500,
                clip_norm: 5.0,
                ..TrainConfig::default()
            },
            data: DataConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Config> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| DanceError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative manifest path is resolved against
    /// the config file's directory.
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| DanceError::io(path, e))?;
        let mut cfg = Config::from_json(&text)?;
        if cfg.data.manifest.is_relative() && !cfg.data.manifest.as_os_str().is_empty() {
            if let Some(dir) = path.parent() {
                cfg.data.manifest = dir.join(&cfg.data.manifest);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form of the model and train sections.
    pub fn hash(&self) -> String {
        let v = serde_json::json!({"model": self.model, "train": self.train});
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}
