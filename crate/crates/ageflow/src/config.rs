//! JSON-backed configuration mirroring the three config types. Partial
//! files work: every field has a default.

use std::path::Path;

use crate::adversary::LossWeights;
use crate::error::{Error, Result};
use crate::glow::GlowConfig;
use crate::ictm::IctmConfig;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr_glow: f64,
    pub lr_ictm: f64,
    pub lr_disc: f64,
    pub micro_batch: usize,
    pub accumulation: usize,
    pub glow_iters: usize,
    pub ictm_iters: usize,
    pub weights: LossWeights,
    /// manipulation scale s shared by the distillation target and the
    /// prototype-editing translation modes
    pub manip_scale: f64,
    pub sample_temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 7,
            lr_glow: 1e-5,
            lr_ictm: 1e-5,
            lr_disc: 1e-4,
            micro_batch: 16,
            accumulation: 4,
            glow_iters: 200,
            ictm_iters: 600,
            weights: LossWeights::default(),
            manip_scale: 1.0,
            sample_temperature: 0.7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_glow <= 0.0 || self.lr_ictm <= 0.0 || self.lr_disc <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.micro_batch == 0 {
            return Err(Error::Config("micro_batch must be positive".into()));
        }
        if self.accumulation == 0 {
            return Err(Error::Config("accumulation must be >= 1".into()));
        }
        self.weights.validate()
    }
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub glow: GlowConfig,
    pub ictm: IctmConfig,
    pub train: TrainConfig,
}

impl AppConfig {
    pub fn validate(&self) -> Result<()> {
        self.glow.validate()?;
        self.ictm.validate()?;
        self.train.validate()?;
        let (packed_c, _, _) = self.glow.packed_shape();
        if packed_c != self.ictm.latent_channels {
            return Err(Error::Config(format!(
                "glow packs {packed_c} latent channels but ictm expects {}",
                self.ictm.latent_channels
            )));
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<AppConfig> {
        let cfg: AppConfig =
            serde_json::from_str(json).map_err(|e| Error::Config(format!("bad config JSON: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<AppConfig> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_consistent() {
        let cfg = AppConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.train.lr_glow, 1e-5);
        assert_eq!(cfg.train.lr_disc, 1e-4);
        assert_eq!(cfg.train.micro_batch, 16);
        assert_eq!(cfg.train.accumulation, 4);
        assert_eq!(cfg.ictm.flows, 32);
        assert_eq!(cfg.glow.packed_shape(), (64, 4, 4));
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = AppConfig::from_json(r#"{"train": {"seed": 99, "glow_iters": 5}}"#).unwrap();
        assert_eq!(cfg.train.seed, 99);
        assert_eq!(cfg.train.glow_iters, 5);
        assert_eq!(cfg.train.micro_batch, 16);
    }

    #[test]
    fn json_round_trip() {
        let cfg = AppConfig::default();
        let back = AppConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn mismatched_packing_rejected() {
        let mut cfg = AppConfig::default();
        cfg.ictm.latent_channels = 32;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn bad_values_rejected() {
        let mut cfg = AppConfig::default();
        cfg.train.accumulation = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = AppConfig::default();
        cfg.train.weights.akd = -1.0;
        assert!(cfg.validate().is_err());
    }
}
