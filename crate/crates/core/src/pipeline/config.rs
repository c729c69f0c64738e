//! Model and training hyperparameters.
//!
//! The file form is TOML with one key per field; missing keys take the
//! defaults below.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::dag::GraphVariant;
use crate::drope::{RopeMode, RopeSettings, THETA_MAC, THETA_MIC};
use crate::grid::ClassWeights;
use crate::tensor::AdamW;

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "TCDA_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Feature width `d`.
    pub d: usize,
    pub encoder_layers: usize,
    pub gcn_layers: usize,
    pub dag_layers: usize,
    pub window: usize,
    pub topk_ratio: f64,
    pub theta_mic: f64,
    pub theta_mac: f64,
    /// Task-space width of each grid head; split evenly between the micro
    /// and macro subspaces.
    pub head_width: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_rest: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Epochs without a dev Micro F1 improvement before stopping.
    pub patience: usize,
    /// Stop as soon as the monitored F1 reaches this value.
    pub target_f1: Option<f64>,
    pub seed: u64,
    pub class_weights: ClassWeights,
    pub graph_variant: GraphVariant,
    pub rope_mode: RopeMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            d: 64,
            encoder_layers: 2,
            gcn_layers: 3,
            dag_layers: 2,
            window: 3,
            topk_ratio: 0.8,
            theta_mic: THETA_MIC,
            theta_mac: THETA_MAC,
            head_width: 64,
            dropout: 0.1,
            batch_size: 2,
            lr_encoder: 1e-5,
            lr_rest: 1e-4,
            weight_decay: 0.01,
            epochs: 100,
            patience: 20,
            target_f1: None,
            seed: 1,
            class_weights: ClassWeights::default(),
            graph_variant: GraphVariant::Tc,
            rope_mode: RopeMode::Dual,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |msg: String| Err(PipelineError::Config(msg));
        for (name, v) in [
            ("d", self.d),
            ("encoder_layers", self.encoder_layers),
            ("gcn_layers", self.gcn_layers),
            ("dag_layers", self.dag_layers),
            ("window", self.window),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("patience", self.patience),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.seed > i64::MAX as u64 {
            return bad(format!("seed must be at most {}, got {}", i64::MAX, self.seed));
        }
        if !(self.topk_ratio > 0.0 && self.topk_ratio <= 1.0) {
            return bad(format!("topk_ratio must lie in (0, 1], got {}", self.topk_ratio));
        }
        if !(self.theta_mic > self.theta_mac && self.theta_mac > 1.0) {
            return bad(format!("need theta_mic > theta_mac > 1, got {} and {}", self.theta_mic, self.theta_mac));
        }
        if self.head_width == 0 || !self.head_width.is_multiple_of(4) {
            return bad(format!("head_width must be a positive multiple of 4, got {}", self.head_width));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        for (name, v) in [("lr_encoder", self.lr_encoder), ("lr_rest", self.lr_rest)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if let Some(t) = self.target_f1 {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("target_f1 must lie in [0, 1], got {t}"));
            }
        }
        self.class_weights.validate().map_err(PipelineError::Config)
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads a config file and applies the `TCDA_SEED` override.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<(), PipelineError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| PipelineError::Config(format!("{SEED_ENV}={v} is not an integer")))?;
        }
        self.validate()
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn rope(&self) -> RopeSettings {
        RopeSettings { mode: self.rope_mode, theta_mic: self.theta_mic, theta_mac: self.theta_mac }
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW { lr_encoder: self.lr_encoder, lr_rest: self.lr_rest, weight_decay: self.weight_decay, ..AdamW::default() }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
