//! Vectorized stepping throughput with the nominal controller in the loop.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::DroneParams;
use crate::envs::{EnvConfig, EnvError, RandomizationRanges, VecEnv, ACT_DIM};
use crate::nominal::{CascadeGains, ControlError, NominalController};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("n_envs, steps and threads must be positive")]
    Empty,
    #[error("thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Control(#[from] ControlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub n_envs: usize,
    pub threads: usize,
    pub steps: usize,
    pub env_steps: u64,
    pub seconds: f64,
    pub steps_per_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub available_threads: usize,
    pub results: Vec<BenchResult>,
}

impl BenchReport {
    pub fn best(&self) -> Option<&BenchResult> {
        self.results.iter().max_by(|a, b| a.steps_per_sec.total_cmp(&b.steps_per_sec))
    }
}

/// Step `n_envs` nominal-parameter hover environments for `steps` lockstep
/// steps on a pool of `threads` workers.
pub fn run(n_envs: usize, steps: usize, threads: usize, seed: u64) -> Result<BenchResult, BenchError> {
    if n_envs == 0 || steps == 0 || threads == 0 {
        return Err(BenchError::Empty);
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    pool.install(|| {
        let drone = DroneParams::default();
        let ranges = RandomizationRanges { period_steps: 0, ..RandomizationRanges::collapsed(&drone) };
        let cfg = EnvConfig::default();
        let mut venv = VecEnv::new(cfg, drone, ranges, n_envs, seed)?;
        let mut ctls = vec![NominalController::new(drone, CascadeGains::default()); n_envs];
        let mut obs = venv.observations();
        let mut actions = vec![[0.0; ACT_DIM]; n_envs];
        let start = Instant::now();
        for _ in 0..steps {
            ctls.par_iter_mut()
                .zip(actions.par_iter_mut())
                .zip(obs.par_iter().zip(venv.envs.par_iter()))
                .try_for_each(|((ctl, a), (o, env))| -> Result<(), ControlError> {
                    *a = ctl.act(o, env.goal.pitch_goal, cfg.dt)?.to_normalized(drone.thrust_max);
                    Ok(())
                })?;
            let out = venv.vec_step(&actions)?;
            for (ctl, done) in ctls.iter_mut().zip(&out.dones) {
                if *done {
                    ctl.reset();
                }
            }
            obs = out.obs;
        }
        let seconds = start.elapsed().as_secs_f64();
        let env_steps = (n_envs * steps) as u64;
        Ok(BenchResult { n_envs, threads, steps, env_steps, seconds, steps_per_sec: env_steps as f64 / seconds })
    })
}

/// Thread counts 1, 2, 4, … up to the machine's parallelism (always
/// including the maximum itself).
pub fn thread_ladder(max: usize) -> Vec<usize> {
    let max = max.max(1);
    let mut v: Vec<usize> = std::iter::successors(Some(1usize), |t| Some(t * 2)).take_while(|t| *t < max).collect();
    v.push(max);
    v
}

pub fn scaling(n_envs: usize, steps: usize, seed: u64) -> Result<BenchReport, BenchError> {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let results = thread_ladder(available)
        .into_iter()
        .map(|t| run(n_envs, steps, t, seed))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BenchReport { available_threads: available, results })
}
