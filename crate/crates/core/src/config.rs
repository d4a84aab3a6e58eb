//! Structured run configuration: TOML file with `[net]`, `[trainer]`,
//! `[data]`, and `[noise]` sections. Unknown keys are rejected so typos
//! fail loudly instead of silently using defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::NoiseSpec;
use crate::error::{Error, Result};
use crate::net::NetConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub patch_size: usize,
    pub patches_per_scene: usize,
    pub augment: bool,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            patch_size: 32,
            patches_per_scene: 8,
            augment: true,
            train_fraction: 0.7,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Named preset; explicit sigma/brightness_scale override it.
    pub preset: Option<String>,
    pub sigma: Option<f64>,
    pub brightness_scale: Option<f64>,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn resolve(&self) -> Result<NoiseSpec> {
        let mut spec = match &self.preset {
            Some(name) => NoiseSpec::preset(name, self.seed)?,
            None => NoiseSpec::new(8.0, 1.0, self.seed)?,
        };
        if let Some(s) = self.sigma {
            spec = NoiseSpec::new(s, spec.brightness_scale, self.seed)?;
        }
        if let Some(b) = self.brightness_scale {
            spec = NoiseSpec::new(spec.sigma, b, self.seed)?;
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub net: NetConfig,
    pub trainer: TrainConfig,
    pub data: DataConfig,
    pub noise: NoiseConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        RunConfig::parse(&text)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Fully-resolved echo written into every run directory.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::FusionMode;

    #[test]
    fn defaults_parse_from_empty() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.net.scales, 3);
        assert_eq!(cfg.net.base_channels, 32);
        assert_eq!(cfg.data.patch_size, 32);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("[net]\nbogus_knob = 3\n").is_err());
        assert!(RunConfig::parse("[wholly_unknown_section]\nx = 1\n").is_err());
    }

    #[test]
    fn roundtrip_preserves_values() {
        let mut cfg = RunConfig::default();
        cfg.net.fusion_mode = FusionMode::Sum;
        cfg.trainer.steps = 123;
        cfg.noise.preset = Some("dvd-sigma4".into());
        let echoed = RunConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(echoed.net.fusion_mode, FusionMode::Sum);
        assert_eq!(echoed.trainer.steps, 123);
        let spec = echoed.noise.resolve().unwrap();
        assert_eq!(spec.sigma, 4.0);
    }

    #[test]
    fn noise_overrides_beat_preset() {
        let cfg = RunConfig::parse("[noise]\npreset = \"dvd-sigma8\"\nsigma = 0.0\n").unwrap();
        assert_eq!(cfg.noise.resolve().unwrap().sigma, 0.0);
    }
}
