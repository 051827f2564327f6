//! Calibration settings, loadable from TOML. Every field is optional in the
//! file and falls back to its default.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scores::InputMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Number of optimizer steps.
    pub steps: usize,
    pub batch_size: usize,
    /// Records drawn per class for training; the rest is held out.
    pub n_train_per_class: usize,

    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Apply weight decay to the balance parameter and scale weights too,
    /// not only to the network.
    pub decay_alpha_and_weights: bool,

    /// Label smoothing strength; targets become `y(1-e) + e/2`.
    pub label_smoothing: f64,
    /// Strength of the `| ||w||_1 - 1 |` penalty.
    pub weight_penalty: f64,
    /// Training noise per scale is `noise_factor * std(delta_s)`.
    pub noise_factor: f64,

    pub mode: InputMode,
    pub learn_alpha: bool,
    pub learn_w: bool,
    pub n_hidden: usize,
    /// Symmetric clamp on the network inputs; 0 disables it.
    pub input_clamp: f64,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 64,
            n_train_per_class: 250,
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            decay_alpha_and_weights: true,
            label_smoothing: 0.1,
            weight_penalty: 1e-2,
            noise_factor: 0.05,
            mode: InputMode::Ratio1d,
            learn_alpha: true,
            learn_w: true,
            n_hidden: 16,
            input_clamp: 50.0,
            seed: 0,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("steps", self.steps),
            ("batch_size", self.batch_size),
            ("n_train_per_class", self.n_train_per_class),
            ("n_hidden", self.n_hidden),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be > 0")));
            }
        }
        let finite = [
            ("learning_rate", self.learning_rate),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("eps", self.eps),
            ("weight_decay", self.weight_decay),
            ("label_smoothing", self.label_smoothing),
            ("weight_penalty", self.weight_penalty),
            ("noise_factor", self.noise_factor),
        ];
        for (name, value) in finite {
            if !value.is_finite() || value < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {value}"
                )));
            }
        }
        if !(self.beta1 < 1.0 && self.beta2 < 1.0) {
            return Err(Error::Config("beta1 and beta2 must be < 1".into()));
        }
        if self.label_smoothing > 1.0 {
            return Err(Error::Config("label_smoothing must be <= 1".into()));
        }
        if !(self.input_clamp.is_finite() && self.input_clamp >= 0.0) {
            return Err(Error::Config(format!(
                "input_clamp must be finite and >= 0, got {}",
                self.input_clamp
            )));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_fields() {
        let c = CalibrationConfig::from_toml_str("steps = 10\nmode = \"pair2d\"\n").unwrap();
        assert_eq!(c.steps, 10);
        assert_eq!(c.mode, InputMode::Pair2d);
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.n_train_per_class, 250);
        assert_eq!(c.label_smoothing, 0.1);
    }

    #[test]
    fn unknown_field_is_rejected() {
        assert!(CalibrationConfig::from_toml_str("stepz = 10").is_err());
    }

    #[test]
    fn zero_steps_is_rejected() {
        assert!(matches!(
            CalibrationConfig::from_toml_str("steps = 0"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn toml_round_trip_and_digest() {
        let c = CalibrationConfig {
            learning_rate: 0.1 + 0.2,
            seed: 42,
            ..Default::default()
        };
        let back = CalibrationConfig::from_toml_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
        assert_ne!(CalibrationConfig::default().digest(), c.digest());
        assert_eq!(c.digest().len(), 64);
    }
}
