//! Run configuration as one TOML document with a section per module.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::AlignConfig;
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::inp::InpConfig;
use crate::score::ScoreConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub encoder: EncoderConfig,
    pub inp: InpConfig,
    pub decoder: DecoderConfig,
    pub align: AlignConfig,
    pub train: TrainConfig,
    pub score: ScoreConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// An 8-wide network on 16×16 inputs, small enough for
    /// finite-difference checks and quick smoke runs.
    pub fn tiny() -> Self {
        let mut cfg = Config::default();
        cfg.encoder = EncoderConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            shallow_layers: vec![1],
            deep_layers: vec![2],
            ..Default::default()
        };
        cfg.inp.prototypes = 2;
        cfg.decoder.depth = 2;
        cfg.decoder.group0_layers = vec![1];
        cfg.decoder.group1_layers = vec![2];
        cfg.train.batch_size = 2;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.train.validate()?;
        if self.inp.prototypes == 0 {
            return Err(Error::Config("inp.prototypes must be at least 1".into()));
        }
        if !(self.score.sigma >= 0.0) {
            return Err(Error::Config("score.sigma must be non-negative".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = Config::default();
        let text = cfg.to_toml();
        assert_eq!(Config::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = Config::from_toml("[train]\nsteps = 5\nlambda2 = 0.4\n").unwrap();
        assert_eq!(cfg.train.steps, 5);
        assert_eq!(cfg.train.lambda2, 0.4);
        assert_eq!(cfg.encoder, EncoderConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            Config::from_toml("[train]\nstepz = 5\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(Config::from_toml("[trian]\n"), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(Config::from_toml("[encoder]\npatch_size = 7\n").is_err());
        assert!(Config::from_toml("[train]\nlambda1 = -1.0\n").is_err());
        assert!(Config::from_toml("[encoder]\nshallow_layers = [1, 5]\n").is_err());
    }
}
