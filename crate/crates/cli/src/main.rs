mod compare;
mod eval;
mod manifest;
mod mixdemo;
mod train;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use tiltrotor_core::config::{HarnessConfig, Preset};
use tiltrotor_core::scenario::{ControllerKind, ScenarioKind};

#[derive(Debug, Parser)]
#[command(name = "tiltrotor", version, about = "Tilting-hexarotor training and evaluation harness")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML file of overrides on top of the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = PresetArg::Desk)]
    pub preset: PresetArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PresetArg {
    Desk,
    Paper,
    Smoke,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Desk => Preset::Desk,
            PresetArg::Paper => Preset::Paper,
            PresetArg::Smoke => Preset::Smoke,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScenarioArg {
    HoverRegular,
    HoverTilted,
    HoverNearWall,
    Lemniscate,
    WallClimb,
}

impl From<ScenarioArg> for ScenarioKind {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::HoverRegular => ScenarioKind::HoverRegular,
            ScenarioArg::HoverTilted => ScenarioKind::HoverTilted,
            ScenarioArg::HoverNearWall => ScenarioKind::HoverNearWall,
            ScenarioArg::Lemniscate => ScenarioKind::Lemniscate,
            ScenarioArg::WallClimb => ScenarioKind::WallClimb,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ControllerArg {
    Nominal,
    Ppo,
    Retro,
}

impl From<ControllerArg> for ControllerKind {
    fn from(c: ControllerArg) -> Self {
        match c {
            ControllerArg::Nominal => ControllerKind::Nominal,
            ControllerArg::Ppo => ControllerKind::Ppo,
            ControllerArg::Retro => ControllerKind::Retro,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a policy, or one per randomization period when
    /// `sweep_periods` is set.
    Train,
    /// Fly a scenario with one controller and log every step.
    Eval(eval::EvalArgs),
    /// Pairwise Welch tests and box-plot data across eval runs.
    Compare(compare::CompareArgs),
    /// Vectorized stepping throughput with the nominal controller.
    Bench(BenchArgs),
    /// Mixer weight as the state moves away from the training envelope.
    MixDemo(mixdemo::MixDemoArgs),
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 256)]
    n_envs: usize,
    #[arg(long, default_value_t = 400)]
    steps: usize,
}

pub fn load_config(g: &GlobalArgs) -> Result<HarnessConfig> {
    let preset = g.preset.into();
    let mut cfg = match &g.config {
        Some(path) => HarnessConfig::load(path, preset).with_context(|| format!("config {}", path.display()))?,
        None => HarnessConfig::preset(preset),
    };
    if let Some(seed) = g.seed {
        cfg.trainer.seed = seed;
    }
    Ok(cfg)
}

fn bench(g: &GlobalArgs, a: &BenchArgs) -> Result<()> {
    let report = tiltrotor_core::bench::scaling(a.n_envs, a.steps, g.seed.unwrap_or(0))?;
    for r in &report.results {
        println!("{:>3} thread(s): {:>12.0} env-steps/s ({} envs x {} steps)", r.threads, r.steps_per_sec, r.n_envs, r.steps);
    }
    std::fs::create_dir_all(&g.out)?;
    let path = g.out.join("bench.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let g = &cli.global;
    match &cli.command {
        Command::Train => train::run(g),
        Command::Eval(a) => eval::run(g, a),
        Command::Compare(a) => compare::run(g, a),
        Command::Bench(a) => bench(g, a),
        Command::MixDemo(a) => mixdemo::run(g, a),
    }
}
