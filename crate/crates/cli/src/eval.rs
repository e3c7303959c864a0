use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use tiltrotor_core::checkpoint;
use tiltrotor_core::config::HarnessConfig;
use tiltrotor_core::policy::MlpParams;
use tiltrotor_core::scenario::{ControllerKind, EpisodeSummary, Runner, ScenarioKind, ScenarioSpec};

use crate::manifest::RunManifest;
use crate::{load_config, ControllerArg, GlobalArgs, ScenarioArg};

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Defaults to `[scenario] kind` from the config.
    #[arg(long, value_enum)]
    pub scenario: Option<ScenarioArg>,
    #[arg(long, value_enum)]
    pub controller: Option<ControllerArg>,
    /// Policy checkpoint; required for ppo and retro.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub episodes: u64,
    /// Re-evaluate the controller at 30 Hz and hold actions in between.
    #[arg(long)]
    pub hold_30hz: bool,
    /// Force the wall disturbance on or off.
    #[arg(long)]
    pub wall: Option<bool>,
}

/// `summary.json` of an eval run; `compare` reads these back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub scenario: ScenarioKind,
    pub controller: ControllerKind,
    pub spec: ScenarioSpec,
    pub mean_position_rmse: f64,
    pub mean_pitch_rmse: f64,
    pub mean_weight: Option<f64>,
    pub terminated: usize,
    pub episodes: Vec<EpisodeSummary>,
}

pub fn scenario_spec(cfg: &HarnessConfig, a: &EvalArgs) -> ScenarioSpec {
    let mut spec = cfg.scenario.clone();
    if let Some(kind) = a.scenario {
        let kind: ScenarioKind = kind.into();
        spec.kind = kind;
        spec.wall_enabled = ScenarioSpec::new(kind, spec.controller).wall_enabled;
    }
    if let Some(c) = a.controller {
        spec.controller = c.into();
    }
    if let Some(w) = a.wall {
        spec.wall_enabled = w;
    }
    if a.hold_30hz {
        spec = spec.hold_30hz();
    }
    spec
}

pub fn load_policy(path: Option<&PathBuf>, needed: bool) -> Result<Option<MlpParams>> {
    match path {
        Some(p) => {
            let (params, _) = checkpoint::load(p).with_context(|| format!("checkpoint {}", p.display()))?;
            Ok(Some(params))
        }
        None if needed => bail!("this controller needs --checkpoint"),
        None => Ok(None),
    }
}

pub fn runner<'a>(cfg: &HarnessConfig, policy: Option<&'a MlpParams>) -> Runner<'a> {
    Runner {
        drone: cfg.drone,
        model: cfg.drone,
        gains: cfg.gains.clone(),
        env: cfg.env,
        mixer: cfg.mixer.clone(),
        policy,
    }
}

pub fn run(g: &GlobalArgs, a: &EvalArgs) -> Result<()> {
    let cfg = load_config(g)?;
    let spec = scenario_spec(&cfg, a);
    spec.validate()?;
    if a.episodes == 0 {
        bail!("--episodes must be positive");
    }
    let policy = load_policy(a.checkpoint.as_ref(), spec.controller.needs_policy())?;
    let runner = runner(&cfg, policy.as_ref());
    let seed = g.seed.unwrap_or(0);
    std::fs::create_dir_all(&g.out)?;

    let mut episodes = Vec::new();
    for i in 0..a.episodes {
        let r = runner.run(&spec, seed + i)?;
        let mut w = csv::Writer::from_path(g.out.join(format!("episode_{i:03}.csv")))?;
        for row in &r.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(g.out.join(format!("lyapunov_{i:03}.csv")))?;
        for s in &r.lyapunov {
            w.serialize(s)?;
        }
        w.flush()?;
        episodes.push(r.summary);
    }

    let n = episodes.len() as f64;
    let weights: Vec<f64> = episodes.iter().filter_map(|e| e.mean_weight).collect();
    let summary = EvalSummary {
        scenario: spec.kind,
        controller: spec.controller,
        spec: spec.clone(),
        mean_position_rmse: episodes.iter().map(|e| e.position_rmse).sum::<f64>() / n,
        mean_pitch_rmse: episodes.iter().map(|e| e.pitch_rmse).sum::<f64>() / n,
        mean_weight: (!weights.is_empty()).then(|| weights.iter().sum::<f64>() / weights.len() as f64),
        terminated: episodes.iter().filter(|e| e.terminated).count(),
        episodes,
    };
    std::fs::write(g.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    RunManifest::new("eval", &cfg, seed, a.checkpoint.as_deref(), &g.out)?.write(&g.out)?;
    println!(
        "{} / {}: position RMSE {:.4} m, pitch RMSE {:.4} rad, {} of {} terminated{}",
        spec.kind.name(),
        spec.controller.name(),
        summary.mean_position_rmse,
        summary.mean_pitch_rmse,
        summary.terminated,
        a.episodes,
        summary.mean_weight.map(|w| format!(", mean weight {w:.3}")).unwrap_or_default()
    );
    Ok(())
}
