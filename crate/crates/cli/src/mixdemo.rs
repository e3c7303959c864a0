use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use nalgebra::{UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use tiltrotor_core::dynamics::ALPHA_MAX;
use tiltrotor_core::envs::{EnvConfig, Observation, ACT_DIM};
use tiltrotor_core::mixer;

use crate::eval::load_policy;
use crate::manifest::RunManifest;
use crate::{load_config, GlobalArgs};

#[derive(Debug, Args)]
pub struct MixDemoArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Largest multiple of the reset envelope to probe.
    #[arg(long, default_value_t = 5.0)]
    pub max_scale: f64,
    #[arg(long, default_value_t = 10)]
    pub points: usize,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
}

#[derive(Debug, Serialize)]
struct Row {
    scale: f64,
    kl_raw_mean: f64,
    weight_mean: f64,
    weight_min: f64,
    weight_max: f64,
}

/// Every observation component at `scale` times the reset bound.
fn probe(env: &EnvConfig, scale: f64) -> Observation {
    let tilt = scale * env.init_tilt;
    Observation {
        p: Vector3::repeat(scale * env.init_pos),
        q: UnitQuaternion::from_euler_angles(tilt, tilt, 0.0),
        v: Vector3::repeat(scale * env.init_lin_vel),
        w: Vector3::repeat(scale * env.init_ang_vel),
        alpha: scale * ALPHA_MAX,
    }
}

pub fn run(g: &GlobalArgs, a: &MixDemoArgs) -> Result<()> {
    if a.points == 0 || a.trials == 0 || !(a.max_scale > 0.0) {
        bail!("--points, --trials and --max-scale must be positive");
    }
    let cfg = load_config(g)?;
    let policy = load_policy(Some(&a.checkpoint), true)?.expect("checkpoint given");
    let seed = g.seed.unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::fs::create_dir_all(&g.out)?;
    let mut w = csv::Writer::from_path(g.out.join("mix_demo.csv"))?;
    for k in 0..=a.points {
        let scale = a.max_scale * k as f64 / a.points as f64;
        let s = probe(&cfg.env, scale);
        let (mut kl, mut sum, mut lo, mut hi) = (0.0, 0.0, f64::INFINITY, f64::NEG_INFINITY);
        for _ in 0..a.trials {
            let d = mixer::mix(&s, &policy, &[0.0; ACT_DIM], &cfg.mixer, &mut rng)?;
            kl += d.kl_raw;
            sum += d.weight;
            lo = lo.min(d.weight);
            hi = hi.max(d.weight);
        }
        let n = a.trials as f64;
        let row = Row { scale, kl_raw_mean: kl / n, weight_mean: sum / n, weight_min: lo, weight_max: hi };
        println!("scale {:>5.2}: kl {:>9.4} weight {:.4} [{:.4}, {:.4}]", row.scale, row.kl_raw_mean, row.weight_mean, lo, hi);
        w.serialize(&row)?;
    }
    w.flush()?;
    RunManifest::new("mix-demo", &cfg, seed, Some(&a.checkpoint), &g.out)?.write(&g.out)?;
    Ok(())
}
