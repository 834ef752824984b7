//! Run configuration. A flat set of `key = value` pairs, read from a TOML
//! file with command-line overrides layered on top.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{SplitMode, DEFAULT_CUTOFF};
use crate::error::{Error, Result};
use crate::frames::FrameMode;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    #[default]
    Geomix,
    /// Proportion-vector MLP baseline.
    ProportionMlp,
}

/// How the cross-frame rotation is parameterized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformVariant {
    /// Unconstrained 3×3 matrix per atom pair.
    #[default]
    Free,
    /// Unit quaternion per atom pair.
    Quaternion,
    /// Two vectors orthonormalized by Gram-Schmidt, per atom pair.
    Sixd,
    /// One unconstrained matrix per molecule pair, from mean-pooled features.
    Graphwise,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReadoutMode {
    #[default]
    Attention,
    Linear,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProportionMode {
    /// Proportion appended to every atom's scalar features.
    #[default]
    Embed,
    /// Molecule embedding scaled by its proportion after pooling.
    Multiply,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    // model
    pub architecture: Architecture,
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    pub channels: usize,
    pub num_atom_types: usize,
    pub cutoff: f64,
    pub frame_mode: FrameMode,
    /// Zero removes the interaction network entirely.
    pub gin_layers: usize,
    pub transform: TransformVariant,
    pub readout: ReadoutMode,
    pub proportion: ProportionMode,
    pub attention_heads: usize,
    pub attention_layers: usize,
    pub slot_capacity: usize,
    pub attention_dropout: f64,
    pub attention_temperature: f64,
    pub head_layers: usize,

    // training
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub gamma: f64,
    pub noise_sigma: f64,
    pub noisy_nodes: bool,
    pub log_target: bool,

    // data
    pub split: SplitMode,
    pub conductivity_threshold: f64,
    pub temperature_threshold: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            architecture: Architecture::Geomix,
            hidden_dim: 64,
            encoder_layers: 4,
            channels: 8,
            num_atom_types: 16,
            cutoff: DEFAULT_CUTOFF,
            frame_mode: FrameMode::Strict,
            gin_layers: 3,
            transform: TransformVariant::Free,
            readout: ReadoutMode::Attention,
            proportion: ProportionMode::Embed,
            attention_heads: 4,
            attention_layers: 3,
            slot_capacity: 8,
            attention_dropout: 0.0,
            attention_temperature: 1.0,
            head_layers: 3,
            lr: 5e-5,
            weight_decay: 1e-12,
            epochs: 500,
            batch_size: 128,
            seed: 7,
            gamma: 128.0,
            noise_sigma: 0.3,
            noisy_nodes: true,
            log_target: false,
            split: SplitMode::Random,
            conductivity_threshold: 10.0,
            temperature_threshold: 320.0,
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
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value` overrides. Values are read as TOML scalars, and
    /// as plain strings when that fails.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(&self.to_toml()).map_err(|e| Error::Config(e.to_string()))?;
        for kv in overrides {
            let kv = kv.as_ref();
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
            let (k, v) = (k.trim().replace('-', "_"), v.trim());
            let value = toml::from_str::<toml::Table>(&format!("v = {v}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(v.to_string()));
            table.insert(k, value);
        }
        let cfg: Config = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden_dim == 0 || self.channels == 0 || self.encoder_layers == 0 {
            return bad("hidden_dim, channels and encoder_layers must be positive".into());
        }
        if self.attention_heads == 0 || self.hidden_dim % self.attention_heads != 0 {
            return bad(format!(
                "attention_heads ({}) must divide hidden_dim ({})",
                self.attention_heads, self.hidden_dim
            ));
        }
        if self.slot_capacity == 0 || self.head_layers == 0 || self.batch_size == 0 {
            return bad("slot_capacity, head_layers and batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.attention_dropout) {
            return bad(format!("attention_dropout {} outside [0, 1)", self.attention_dropout));
        }
        if !(self.attention_temperature > 0.0) {
            return bad("attention_temperature must be positive".into());
        }
        if !(self.gamma >= 0.0) || !(self.noise_sigma >= 0.0) {
            return bad("gamma and noise_sigma must be non-negative".into());
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr must be positive and weight_decay non-negative".into());
        }
        if !(self.cutoff > 0.0) {
            return bad("cutoff must be positive".into());
        }
        if self.seed > i64::MAX as u64 {
            return bad(format!("seed {} exceeds {}", self.seed, i64::MAX));
        }
        Ok(())
    }

    /// Effective noise level and denoising weight.
    pub fn noise(&self) -> (f64, f64) {
        if self.noisy_nodes {
            (self.noise_sigma, self.gamma)
        } else {
            (0.0, 0.0)
        }
    }

    pub fn split_threshold(&self) -> f64 {
        match self.split {
            SplitMode::OodTemperature => self.temperature_threshold,
            _ => self.conductivity_threshold,
        }
    }
}
