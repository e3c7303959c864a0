//! Harness configuration: one TOML document with a table per component.
//! A file only needs the keys it changes; everything else comes from the
//! selected preset.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::DroneParams;
use crate::envs::{EnvConfig, RandomizationRanges};
use crate::mixer::MixerConfig;
use crate::nominal::CascadeGains;
use crate::scenario::ScenarioSpec;
use crate::trainer::TrainerConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("serializing config: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
    Smoke,
}

impl std::str::FromStr for Preset {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            "smoke" => Ok(Preset::Smoke),
            other => Err(ConfigError::Invalid(format!("unknown preset {other:?} (desk, paper, smoke)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub drone: DroneParams,
    pub env: EnvConfig,
    pub randomization: RandomizationRanges,
    pub gains: CascadeGains,
    pub trainer: TrainerConfig,
    pub mixer: MixerConfig,
    pub scenario: ScenarioSpec,
    /// Randomization periods for a training sweep; empty trains once with
    /// `randomization.period_steps`.
    pub sweep_periods: Vec<u64>,
}

impl HarnessConfig {
    pub fn preset(p: Preset) -> Self {
        let trainer = match p {
            Preset::Desk => TrainerConfig::desk(),
            Preset::Paper => TrainerConfig::paper(),
            Preset::Smoke => TrainerConfig::smoke(),
        };
        Self { trainer, ..Self::default() }
    }

    /// Parse `text` as overrides on top of `base`.
    pub fn from_toml_str(text: &str, base: Preset) -> Result<Self, ConfigError> {
        let overrides: toml::Table = text.parse()?;
        let mut merged = toml::Table::try_from(Self::preset(base))?;
        merge(&mut merged, overrides);
        let cfg: Self = merged.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, base: Preset) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text, base)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |section: &str, e: &dyn std::fmt::Display| ConfigError::Invalid(format!("[{section}] {e}"));
        self.drone.validate().map_err(|e| invalid("drone", &e))?;
        self.env.validate().map_err(|e| invalid("env", &e))?;
        self.randomization.validate(&self.drone).map_err(|e| invalid("randomization", &e))?;
        self.gains.validate().map_err(|e| invalid("gains", &e))?;
        self.trainer.validate().map_err(|e| invalid("trainer", &e))?;
        self.mixer.validate().map_err(|e| invalid("mixer", &e))?;
        self.scenario.validate().map_err(|e| invalid("scenario", &e))?;
        Ok(())
    }
}

/// Recursive table merge; values in `over` win.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
