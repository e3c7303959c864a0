use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::{Deserialize, Serialize};

use tiltrotor_core::checkpoint::config_hash;
use tiltrotor_core::config::HarnessConfig;

/// Everything needed to rerun a command. Deliberately free of wall-clock
/// fields so reruns produce identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &HarnessConfig, seed: u64, checkpoint: Option<&Path>, out_dir: &Path) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            version: concat!("tiltrotor ", env!("CARGO_PKG_VERSION")).to_string(),
            config_hash: config_hash(&cfg.to_toml()?),
            seed,
            checkpoint: checkpoint.map(Path::to_path_buf),
            out_dir: out_dir.to_path_buf(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
