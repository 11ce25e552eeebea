//! The global JSON configuration document.
//!
//! One file with the sections `layout`, `heads`, `encoders`, `backbone`,
//! `mixture`, `train` and `eval`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assembler::LayoutConfig;
use crate::backbone::BackboneConfig;
use crate::datapipe::{AugmentConfig, MixtureSpec};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::heads::ActionHeadSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub layout: LayoutConfig,
    pub heads: Vec<ActionHeadSpec>,
    pub encoders: EncoderConfig,
    pub backbone: BackboneConfig,
    pub mixture: MixtureSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    /// Validate (and checkpoint) every this many steps; the final step is
    /// always validated.
    pub val_every: u64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    /// Fraction of each dataset's trajectories held out for validation.
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    /// Fixed number of held-out windows scored per dataset.
    #[serde(default = "default_val_windows")]
    pub val_windows: usize,
    #[serde(default)]
    pub augment: AugmentConfig,
}

fn default_log_every() -> u64 {
    100
}

fn default_holdout() -> f64 {
    0.05
}

fn default_val_windows() -> usize {
    64
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 3e-4,
            warmup_steps: 2000,
            weight_decay: 0.1,
            clip_norm: 1.0,
            batch_size: 64,
            total_steps: 10_000,
            seed: 0,
            val_every: 1000,
            log_every: default_log_every(),
            holdout_fraction: default_holdout(),
            val_windows: default_val_windows(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps < 1 {
            return Err(Error::Config("warmup_steps must be at least 1".into()));
        }
        if !(self.peak_lr > 0.0 && self.clip_norm > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "learning rate and clip threshold must be positive, weight decay non-negative"
                    .into(),
            ));
        }
        if self.batch_size == 0 || self.total_steps == 0 || self.val_every == 0 {
            return Err(Error::Config(
                "batch_size, total_steps and val_every must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteEntry {
    pub embodiment: String,
    pub trials: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub suite: Vec<SuiteEntry>,
    /// Seed of trial `i` is `seed_base + i`.
    #[serde(default)]
    pub seed_base: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            suite: ["arm1", "nav", "bimanual", "quad"]
                .iter()
                .map(|e| SuiteEntry {
                    embodiment: (*e).to_owned(),
                    trials: 100,
                })
                .collect(),
            seed_base: 1_000_000,
        }
    }
}

impl Config {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let cfg: Config = serde_json::from_str(&text)?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text)?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex_digest(&bytes)
    }

    /// The built-in desk-scale configuration.
    pub fn desk() -> Self {
        Self::from_json(DESK_JSON).expect("embedded desk config is valid")
    }

    /// The desk model with the reduced-batch schedule used for the
    /// cross-embodiment versus specialist comparison.
    pub fn parity() -> Self {
        Self::from_json(PARITY_JSON).expect("embedded parity config is valid")
    }

    /// The paper-scale shape configuration (12 layers, width 512).
    pub fn paper_scale() -> Self {
        Self::from_json(PAPER_SCALE_JSON).expect("embedded paper-scale config is valid")
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub const DESK_JSON: &str = include_str!("../configs/desk.json");
pub const PARITY_JSON: &str = include_str!("../configs/parity.json");
pub const PAPER_SCALE_JSON: &str = include_str!("../configs/paper_scale.json");
pub const PAPER_MIXTURE_JSON: &str = include_str!("../configs/paper_mixture.json");
