use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::corpus::hex;
use crate::error::{MsvedError, Result};
use crate::objectives::{Mode, ObjectiveWeights};
use crate::seq_model::ModelConfig;

/// How labeled and unlabeled batches share optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interleave {
    /// One update per batch, labeled and unlabeled batches alternating.
    Alternate,
    /// Each labeled batch and the unlabeled batches scheduled with it form
    /// one update.
    Joint,
}

/// Every scalar knob of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub mode: Mode,
    pub lambda_max: f64,
    pub beta: f64,
    pub alpha: f64,
    pub classification_weight: f64,
    pub char_dim: usize,
    pub tag_dim: usize,
    pub hidden: usize,
    pub latent: usize,
    pub mlp_hidden: usize,
    pub attention_dim: usize,
    pub tau_start: f64,
    pub tau_min: f64,
    /// Exponential decay rate; by default the floor is reached after a
    /// third of `max_epochs`.
    pub tau_rate: Option<f64>,
    /// Length of the linear KL ramp; two epochs of updates by default.
    pub ramp_steps: Option<u64>,
    pub batch_size: usize,
    pub rho: f64,
    pub epsilon: f64,
    pub grad_clip_norm: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub beam_size: usize,
    pub max_decode_factor: usize,
    pub interleave: Interleave,
    /// Abort on NaN or infinity anywhere in the forward pass.
    pub checked: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        TrainingConfig {
            mode: Mode::SemiSup,
            lambda_max: 0.2,
            beta: 0.4,
            alpha: 0.8,
            classification_weight: 1.0,
            char_dim: m.char_dim,
            tag_dim: m.tag_dim,
            hidden: m.hidden,
            latent: m.latent,
            mlp_hidden: m.mlp_hidden,
            attention_dim: m.attention_dim,
            tau_start: 1.0,
            tau_min: 0.5,
            tau_rate: None,
            ramp_steps: None,
            batch_size: 32,
            rho: 0.95,
            epsilon: 1e-6,
            grad_clip_norm: 5.0,
            patience: 10,
            max_epochs: 100,
            seed: 1,
            beam_size: 8,
            max_decode_factor: 2,
            interleave: Interleave::Alternate,
            checked: false,
        }
    }
}

impl TrainingConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            char_dim: self.char_dim,
            tag_dim: self.tag_dim,
            hidden: self.hidden,
            latent: self.latent,
            mlp_hidden: self.mlp_hidden,
            attention_dim: self.attention_dim,
        }
    }

    pub fn set_model(&mut self, m: ModelConfig) {
        self.char_dim = m.char_dim;
        self.tag_dim = m.tag_dim;
        self.hidden = m.hidden;
        self.latent = m.latent;
        self.mlp_hidden = m.mlp_hidden;
        self.attention_dim = m.attention_dim;
    }

    pub fn weights(&self) -> ObjectiveWeights {
        ObjectiveWeights {
            alpha: self.alpha,
            classification: self.classification_weight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MsvedError::Config(m));
        if !(0.0..=1.0).contains(&self.lambda_max) {
            return bad(format!("lambda_max must lie in [0, 1], got {}", self.lambda_max));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1), got {}", self.beta));
        }
        if self.alpha.is_nan() || self.alpha < 0.0 || self.classification_weight.is_nan() || self.classification_weight < 0.0 {
            return bad("alpha and classification_weight must be nonnegative".into());
        }
        if !(self.tau_start > 0.0 && self.tau_min > 0.0 && self.tau_min <= self.tau_start) {
            return bad("temperatures must satisfy 0 < tau_min <= tau_start".into());
        }
        if self.tau_rate.is_some_and(|r| r.is_nan() || r < 0.0) {
            return bad("tau_rate must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.rho) || self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("adadelta needs 0 <= rho < 1 and epsilon > 0".into());
        }
        if self.grad_clip_norm.is_nan() || self.grad_clip_norm <= 0.0 {
            return bad("grad_clip_norm must be positive".into());
        }
        if self.patience < 1 || self.max_epochs < 1 || self.batch_size < 1 || self.beam_size < 1 {
            return bad("patience, max_epochs, batch_size and beam_size must be at least 1".into());
        }
        self.model().validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    /// Defaults, overlaid by a config file (JSON object or `key=value`
    /// lines), overlaid by `overrides`. Unknown keys are rejected.
    pub fn resolve(file: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut merged = match serde_json::to_value(TrainingConfig::default())? {
            Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        if let Some(text) = file {
            for (k, v) in parse_config_text(text)? {
                merged.insert(k, v);
            }
        }
        for (k, v) in overrides {
            merged.insert(k.clone(), scalar_value(v));
        }
        let config: TrainingConfig =
            serde_json::from_value(Value::Object(merged)).map_err(|e| MsvedError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

fn scalar_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Parses a JSON object or `key = value` lines (`#` starts a comment).
pub fn parse_config_text(text: &str) -> Result<Map<String, Value>> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        return match serde_json::from_str(trimmed).map_err(|e| MsvedError::Config(e.to_string()))? {
            Value::Object(m) => Ok(m),
            _ => Err(MsvedError::Config("config JSON must be an object".into())),
        };
    }
    let mut out = Map::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| MsvedError::Parse {
            line: i + 1,
            message: format!("expected key=value, found `{line}`"),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(MsvedError::Parse {
                line: i + 1,
                message: "empty key".into(),
            });
        }
        out.insert(k.to_string(), scalar_value(v.trim()));
    }
    Ok(out)
}
