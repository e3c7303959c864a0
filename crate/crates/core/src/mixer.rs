//! Uncertainty-aware control mixer. The policy is probed on a batch of
//! Gaussian-corrupted copies of the state; the spread of its sampled actions
//! (P) is compared against a unit-variance target (Q) centred on one ensemble
//! member, and the resulting KL divergence sets how much of the nominal
//! action is blended in.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{Observation, ACT_DIM, OBS_DIM};
use crate::policy::{self, forward_batch, MlpParams, PolicyError};

#[derive(Debug, Error, PartialEq)]
pub enum MixerError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("invalid mixer config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `min(kl, 1)`
    #[default]
    Clamp,
    /// `1 - exp(-kl)`
    ExpSaturating,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QCenter {
    /// A uniformly drawn ensemble member.
    #[default]
    Random,
    /// The per-dimension median of the ensemble.
    Median,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixerConfig {
    pub batch_n: usize,
    /// Per-component std of the state corruption, in observation order.
    pub perturb_std: [f64; OBS_DIM],
    pub q_var: f64,
    pub var_floor: f64,
    pub normalization: Normalization,
    pub q_center: QCenter,
}

impl Default for MixerConfig {
    fn default() -> Self {
        let mut perturb_std = [0.0; OBS_DIM];
        perturb_std[0..3].fill(0.02);
        perturb_std[3..7].fill(0.01);
        perturb_std[7..13].fill(0.05);
        Self {
            batch_n: 32,
            perturb_std,
            q_var: 1.0,
            var_floor: 1e-6,
            normalization: Normalization::Clamp,
            q_center: QCenter::Random,
        }
    }
}

impl MixerConfig {
    pub fn validate(&self) -> Result<(), MixerError> {
        if self.batch_n < 2 {
            return Err(MixerError::InvalidConfig("batch_n must be >= 2".into()));
        }
        if !(self.q_var > 0.0) || !(self.var_floor > 0.0) {
            return Err(MixerError::InvalidConfig("q_var and var_floor must be > 0".into()));
        }
        if self.perturb_std.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(MixerError::InvalidConfig("perturb_std must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mean: [f64; ACT_DIM],
    pub var: [f64; ACT_DIM],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MixDecision {
    pub kl_raw: f64,
    pub weight: f64,
    pub a_nominal: [f64; ACT_DIM],
    pub a_rl: [f64; ACT_DIM],
    pub a_hybrid: [f64; ACT_DIM],
}

/// `N` corrupted copies of the observation; the quaternion block is
/// renormalized after the noise is added.
pub fn perturb_states(s: &Observation, cfg: &MixerConfig, rng: &mut impl Rng) -> Vec<[f64; OBS_DIM]> {
    let base = s.to_array();
    (0..cfg.batch_n)
        .map(|_| {
            let mut x = base;
            for (v, sd) in x.iter_mut().zip(&cfg.perturb_std) {
                if *sd > 0.0 {
                    let e: f64 = StandardNormal.sample(rng);
                    *v += sd * e;
                }
            }
            let n = x[3..7].iter().map(|c| c * c).sum::<f64>().sqrt();
            if n > 0.0 {
                x[3..7].iter_mut().for_each(|c| *c /= n);
            }
            x
        })
        .collect()
}

/// Per-dimension mean and population variance (two-pass), floored.
pub fn fit_gaussian(actions: &[[f64; ACT_DIM]], var_floor: f64) -> DiagGaussian {
    let n = actions.len().max(1) as f64;
    let mut mean = [0.0; ACT_DIM];
    for a in actions {
        for j in 0..ACT_DIM {
            mean[j] += a[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; ACT_DIM];
    for a in actions {
        for j in 0..ACT_DIM {
            var[j] += (a[j] - mean[j]).powi(2);
        }
    }
    var.iter_mut().for_each(|v| *v = (*v / n).max(var_floor));
    DiagGaussian { mean, var }
}

/// `KL(P ‖ Q)` averaged over the action dimensions.
pub fn kl_divergence(p: &DiagGaussian, q: &DiagGaussian) -> f64 {
    let mut acc = 0.0;
    for j in 0..ACT_DIM {
        let d = p.mean[j] - q.mean[j];
        acc += 0.5 * ((q.var[j] / p.var[j]).ln() + (p.var[j] + d * d) / q.var[j] - 1.0);
    }
    (acc / ACT_DIM as f64).max(0.0)
}

pub fn normalize_weight(kl: f64, mode: Normalization) -> f64 {
    let w = match mode {
        Normalization::Clamp => kl.min(1.0),
        Normalization::ExpSaturating => 1.0 - (-kl).exp(),
    };
    if w.is_nan() {
        1.0
    } else {
        w.clamp(0.0, 1.0)
    }
}

/// `w·a_nominal + (1 − w)·a_rl`
pub fn blend(weight: f64, a_nominal: &[f64; ACT_DIM], a_rl: &[f64; ACT_DIM]) -> [f64; ACT_DIM] {
    std::array::from_fn(|j| weight * a_nominal[j] + (1.0 - weight) * a_rl[j])
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// One mixing decision for observation `s` (actions are normalized).
pub fn mix(
    s: &Observation,
    params: &MlpParams,
    a_nominal: &[f64; ACT_DIM],
    cfg: &MixerConfig,
    rng: &mut impl Rng,
) -> Result<MixDecision, MixerError> {
    cfg.validate()?;
    let batch = perturb_states(s, cfg, rng);
    let cache = forward_batch(params, policy::obs_matrix(&batch).view())?;
    let std = params.std();
    let mut actions = Vec::with_capacity(cfg.batch_n);
    for i in 0..cfg.batch_n {
        let out = policy::GaussianPolicyOutput {
            mean: std::array::from_fn(|j| cache.mean[(i, j)]),
            std: std::array::from_fn(|j| std[j]),
            value: 0.0,
        };
        actions.push(policy::sample(&out, rng).0);
    }
    let p = fit_gaussian(&actions, cfg.var_floor);
    let center = match cfg.q_center {
        QCenter::Random => actions[rng.random_range(0..cfg.batch_n)],
        QCenter::Median => std::array::from_fn(|j| median(actions.iter().map(|a| a[j]).collect())),
    };
    let q = DiagGaussian { mean: center, var: [cfg.q_var; ACT_DIM] };
    let kl_raw = kl_divergence(&p, &q);
    let weight = normalize_weight(kl_raw, cfg.normalization);
    let a_rl = policy::forward(params, &s.to_array())?.mean;
    Ok(MixDecision { kl_raw, weight, a_nominal: *a_nominal, a_rl, a_hybrid: blend(weight, a_nominal, &a_rl) })
}
