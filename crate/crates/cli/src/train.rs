use std::path::Path;

use anyhow::{Context, Result};

use tiltrotor_core::checkpoint::{self, CheckpointMeta, FORMAT_VERSION};
use tiltrotor_core::config::HarnessConfig;
use tiltrotor_core::envs::{RandomizationRanges, ACT_DIM, OBS_DIM};
use tiltrotor_core::trainer::Trainer;

use crate::manifest::RunManifest;
use crate::{load_config, GlobalArgs};

pub fn run(g: &GlobalArgs) -> Result<()> {
    let cfg = load_config(g)?;
    let periods = if cfg.sweep_periods.is_empty() {
        vec![cfg.randomization.period_steps]
    } else {
        cfg.sweep_periods.clone()
    };
    std::fs::create_dir_all(&g.out)?;
    std::fs::write(g.out.join("config.toml"), cfg.to_toml()?)?;
    RunManifest::new("train", &cfg, cfg.trainer.seed, None, &g.out)?.write(&g.out)?;
    for period in periods {
        let dir = g.out.join(format!("period_{period}"));
        train_one(&cfg, period, &dir).with_context(|| format!("training with period {period}"))?;
    }
    Ok(())
}

fn train_one(cfg: &HarnessConfig, period: u64, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let ranges = RandomizationRanges { period_steps: period, ..cfg.randomization.clone() };
    let mut trainer = Trainer::new(cfg.trainer.clone(), cfg.env, cfg.drone, ranges)?;
    let mut metrics = csv::Writer::from_path(dir.join("metrics.csv"))?;
    let mut write_err = None;
    trainer.train(|s| {
        if let Err(e) = metrics.serialize(s) {
            write_err.get_or_insert(e);
        }
        eprintln!(
            "period {period} update {:>4} steps {:>9} reward {:>8.1} kl {:.4} clip {:.3}",
            s.update, s.env_steps, s.mean_episode_reward, s.approx_kl, s.clip_fraction
        );
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    metrics.flush()?;
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        env_steps: trainer.env_steps,
        updates: trainer.updates,
        seed: cfg.trainer.seed,
        config_hash: checkpoint::config_hash(&cfg.to_toml()?),
        obs_dim: OBS_DIM,
        hidden: cfg.trainer.hidden,
        act_dim: ACT_DIM,
    };
    checkpoint::save(&dir.join("policy.bin"), &trainer.params, &meta)?;
    eprintln!("wrote {}", dir.join("policy.bin").display());
    Ok(())
}
