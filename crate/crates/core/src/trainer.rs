//! Synchronous actor-critic rollouts and PPO clipped-surrogate updates with
//! GAE and Adam.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{DroneParams, RotorCommand};
use crate::envs::{EnvConfig, EnvError, RandomizationRanges, VecEnv, ACT_DIM, OBS_DIM};
use crate::nominal::allocation::allocate;
use crate::nominal::ControlError;
use crate::policy::{self, forward_batch, MlpParams, PolicyError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub lr: f64,
    pub clip: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub vf_coef: f64,
    pub ent_coef: f64,
    pub max_grad_norm: f64,
    pub rollout_len: usize,
    pub n_envs: usize,
    pub total_steps: u64,
    pub hidden: usize,
    /// Multiplies rewards before GAE; the logged episode returns are unscaled.
    pub reward_scale: f64,
    /// Start the action mean at the level-hover rotor thrusts.
    pub hover_bias: bool,
    /// Initial action standard deviation (normalized units).
    pub init_std: f64,
    /// Decay the learning rate linearly to zero over the step budget.
    pub lr_anneal: bool,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainerConfig {
    pub fn desk() -> Self {
        Self {
            lr: 0.001,
            clip: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            epochs: 10,
            minibatch: 2048,
            vf_coef: 0.5,
            ent_coef: 0.005,
            max_grad_norm: 1.0,
            rollout_len: 64,
            n_envs: 256,
            total_steps: 5_000_000,
            hidden: 128,
            reward_scale: 0.1,
            hover_bias: true,
            lr_anneal: false,
            init_std: 0.5,
            seed: 0,
        }
    }

    /// Actor count and budget of the GPU-scale runs.
    pub fn paper() -> Self {
        Self {
            n_envs: 8192,
            rollout_len: 16,
            minibatch: 32_768,
            total_steps: 500_000_000,
            ..Self::desk()
        }
    }

    /// Tiny budget for tests and CLI smoke runs.
    pub fn smoke() -> Self {
        Self {
            n_envs: 8,
            rollout_len: 64,
            minibatch: 256,
            total_steps: 10_000,
            hidden: 32,
            ..Self::desk()
        }
    }

    pub fn batch_size(&self) -> usize {
        self.n_envs * self.rollout_len
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.clip > 0.0) {
            return bad("clip must be > 0");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) || !(self.gae_lambda > 0.0 && self.gae_lambda <= 1.0) {
            return bad("gamma and gae_lambda must lie in (0, 1]");
        }
        if !(self.lr > 0.0) || !(self.max_grad_norm > 0.0) || !(self.reward_scale > 0.0) || !(self.init_std > 0.0) {
            return bad("lr, max_grad_norm, reward_scale and init_std must be > 0");
        }
        if self.vf_coef < 0.0 || self.ent_coef < 0.0 {
            return bad("loss coefficients must be >= 0");
        }
        if self.epochs == 0 || self.minibatch == 0 || self.rollout_len == 0 || self.n_envs == 0 || self.hidden == 0 {
            return bad("epochs, minibatch, rollout_len, n_envs and hidden must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub fn adam_step(params: &mut MlpParams, grads: &MlpParams, state: &mut AdamState, lr: f64) -> Result<(), PolicyError> {
    params.check_shape(grads)?;
    if state.m.len() != params.len() {
        return Err(PolicyError::Shape("adam moments".into()));
    }
    state.t += 1;
    let c1 = 1.0 - state.beta1.powi(state.t as i32);
    let c2 = 1.0 - state.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads.data[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params.data[i] -= lr * mh / (vh.sqrt() + state.eps);
    }
    Ok(())
}

/// Transitions laid out step-major: row `t * n_envs + e`.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBuffer {
    pub n_steps: usize,
    pub n_envs: usize,
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub log_probs: Array1<f64>,
    pub rewards: Array1<f64>,
    pub values: Array1<f64>,
    pub dones: Array1<f64>,
    /// V(s_T) for each env after the last step.
    pub last_values: Array1<f64>,
}

impl RolloutBuffer {
    pub fn new(n_steps: usize, n_envs: usize) -> Self {
        let n = n_steps * n_envs;
        Self {
            n_steps,
            n_envs,
            obs: Array2::zeros((n, OBS_DIM)),
            actions: Array2::zeros((n, ACT_DIM)),
            log_probs: Array1::zeros(n),
            rewards: Array1::zeros(n),
            values: Array1::zeros(n),
            dones: Array1::zeros(n),
            last_values: Array1::zeros(n_envs),
        }
    }

    pub fn len(&self) -> usize {
        self.n_steps * self.n_envs
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Finished episode seen during collection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStat {
    pub ret: f64,
    pub len: usize,
    pub alpha: f64,
    pub terminated: bool,
}

/// Step all envs in lockstep for `steps` steps with actions sampled from the
/// policy. Rewards are stored multiplied by `reward_scale`; an episode cut
/// by the step limit gets `gamma·V(s_last)` added to its final reward so
/// that only failures end the return.
pub fn collect(
    venv: &mut VecEnv,
    params: &MlpParams,
    steps: usize,
    reward_scale: f64,
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(RolloutBuffer, Vec<EpisodeStat>), TrainError> {
    let n = venv.len();
    let mut buf = RolloutBuffer::new(steps, n);
    let mut episodes = Vec::new();
    let std = params.std();
    let mut x = policy::obs_matrix(&venv.observations().iter().map(|o| o.to_array()).collect::<Vec<_>>());
    for t in 0..steps {
        let c = forward_batch(params, x.view())?;
        let mut acts = vec![[0.0; ACT_DIM]; n];
        for e in 0..n {
            let row = t * n + e;
            let out = policy::GaussianPolicyOutput {
                mean: std::array::from_fn(|j| c.mean[(e, j)]),
                std: std::array::from_fn(|j| std[j]),
                value: c.value[e],
            };
            let (a, lp) = policy::sample(&out, rng);
            acts[e] = a;
            buf.obs.row_mut(row).assign(&x.row(e));
            buf.actions.row_mut(row).assign(&ArrayView1::from(&a));
            buf.log_probs[row] = lp;
            buf.values[row] = out.value;
        }
        let st = venv.vec_step(&acts)?;
        // episodes cut by the step limit bootstrap from their last state
        let cut: Vec<usize> = (0..n).filter(|&e| st.dones[e] && !st.infos[e].terminated).collect();
        let mut tail = vec![0.0; n];
        if !cut.is_empty() {
            let finals: Vec<[f64; OBS_DIM]> = cut
                .iter()
                .map(|&e| st.infos[e].final_obs.as_ref().map_or(st.obs[e].to_array(), |o| o.to_array()))
                .collect();
            let v = forward_batch(params, policy::obs_matrix(&finals).view())?.value;
            for (k, &e) in cut.iter().enumerate() {
                tail[e] = gamma * v[k];
            }
        }
        for e in 0..n {
            let row = t * n + e;
            buf.rewards[row] = st.rewards[e] * reward_scale + tail[e];
            buf.dones[row] = if st.dones[e] { 1.0 } else { 0.0 };
            if let Some((ret, len)) = st.infos[e].episode {
                episodes.push(EpisodeStat {
                    ret,
                    len,
                    alpha: st.infos[e].alpha_task,
                    terminated: st.infos[e].terminated,
                });
            }
            x.row_mut(e).assign(&ArrayView1::from(&st.obs[e].to_array()));
        }
    }
    buf.last_values = forward_batch(params, x.view())?.value;
    Ok((buf, episodes))
}

/// Generalized advantage estimation; `done` zeroes the bootstrap.
pub fn gae(buf: &RolloutBuffer, gamma: f64, lambda: f64) -> (Array1<f64>, Array1<f64>) {
    let (t_len, n) = (buf.n_steps, buf.n_envs);
    let mut adv = Array1::zeros(buf.len());
    for e in 0..n {
        let mut next_adv = 0.0;
        let mut next_value = buf.last_values[e];
        for t in (0..t_len).rev() {
            let i = t * n + e;
            let live = 1.0 - buf.dones[i];
            let delta = buf.rewards[i] + gamma * next_value * live - buf.values[i];
            next_adv = delta + gamma * lambda * live * next_adv;
            adv[i] = next_adv;
            next_value = buf.values[i];
        }
    }
    let ret = &adv + &buf.values;
    (adv, ret)
}

pub fn normalize(x: &Array1<f64>) -> Array1<f64> {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.mapv(|v| (v - mean).powi(2)).sum() / n;
    x.mapv(|v| (v - mean) / (var.sqrt() + 1e-8))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossTerms {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Minibatch view into a rollout (already advantage-normalized).
pub struct Minibatch<'a> {
    pub obs: ndarray::ArrayView2<'a, f64>,
    pub actions: ndarray::ArrayView2<'a, f64>,
    pub old_log_probs: ArrayView1<'a, f64>,
    pub advantages: ArrayView1<'a, f64>,
    pub returns: ArrayView1<'a, f64>,
}

/// Loss `−surrogate + c_v·MSE(V, R) − c_e·H` and its gradient.
pub fn ppo_loss_grad(
    params: &MlpParams,
    mb: &Minibatch<'_>,
    cfg: &TrainerConfig,
) -> Result<(LossTerms, MlpParams), PolicyError> {
    let b = mb.obs.nrows();
    let bf = b as f64;
    let cache = forward_batch(params, mb.obs)?;
    let std = params.std();
    let var = std.mapv(|s| s * s);
    let log_std_sum: f64 = std.iter().map(|s| s.ln()).sum();
    let const_term = ACT_DIM as f64 * 0.5 * (2.0 * std::f64::consts::PI).ln();

    let mut d_mean = Array2::zeros((b, ACT_DIM));
    let mut d_log_std = Array1::zeros(ACT_DIM);
    let mut d_value = Array1::zeros(b);
    let mut terms = LossTerms::default();
    let (lo, hi) = (1.0 - cfg.clip, 1.0 + cfg.clip);

    for i in 0..b {
        let mut quad = 0.0;
        for j in 0..ACT_DIM {
            let d = mb.actions[(i, j)] - cache.mean[(i, j)];
            quad += d * d / var[j];
        }
        let logp = -0.5 * quad - log_std_sum - const_term;
        let log_ratio = logp - mb.old_log_probs[i];
        let ratio = log_ratio.exp();
        let a = mb.advantages[i];
        let unclipped = ratio * a;
        let clipped = ratio.clamp(lo, hi) * a;
        terms.policy_loss -= unclipped.min(clipped) / bf;
        if !(lo..=hi).contains(&ratio) {
            terms.clip_fraction += 1.0 / bf;
        }
        // unbiased low-variance estimator of KL(old, new)
        terms.approx_kl += ((ratio - 1.0) - log_ratio) / bf;

        // gradient flows only where the unclipped branch is the minimum
        let active = unclipped <= clipped;
        if active {
            let dl_dlogp = -ratio * a / bf;
            for j in 0..ACT_DIM {
                let d = mb.actions[(i, j)] - cache.mean[(i, j)];
                d_mean[(i, j)] = dl_dlogp * d / var[j];
                d_log_std[j] += dl_dlogp * (d * d / var[j] - 1.0);
            }
        }

        let err = cache.value[i] - mb.returns[i];
        terms.value_loss += err * err / bf;
        d_value[i] = cfg.vf_coef * 2.0 * err / bf;
    }
    terms.entropy = policy::entropy(std.as_slice().expect("contiguous"));
    d_log_std -= cfg.ent_coef;

    let grad = policy::backward(params, &cache, d_mean.view(), d_value.view(), d_log_std.view())?;
    Ok((terms, grad))
}

pub fn total_loss(t: &LossTerms, cfg: &TrainerConfig) -> f64 {
    t.policy_loss + cfg.vf_coef * t.value_loss - cfg.ent_coef * t.entropy
}

/// Scale `g` in place so its L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(g: &mut MlpParams, max_norm: f64) -> f64 {
    let norm = g.data.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        g.data.iter_mut().for_each(|v| *v *= s);
    }
    norm
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct UpdateMetrics {
    pub loss: LossTerms,
    pub grad_norm: f64,
    /// The update hit a non-finite value and was rolled back.
    pub aborted: bool,
}

/// Several epochs of shuffled minibatch PPO over one rollout. A non-finite
/// loss or parameter rolls params and optimizer back to their entry state.
pub fn ppo_update(
    params: &mut MlpParams,
    adam: &mut AdamState,
    buf: &RolloutBuffer,
    cfg: &TrainerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateMetrics, PolicyError> {
    let (adv, ret) = gae(buf, cfg.gamma, cfg.gae_lambda);
    let adv = normalize(&adv);
    let snapshot = (params.clone(), adam.clone());
    let n = buf.len();
    let mb_size = cfg.minibatch.min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut acc = UpdateMetrics::default();
    let mut count = 0.0_f64;

    for _ in 0..cfg.epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(mb_size) {
            let obs = buf.obs.select(Axis(0), chunk);
            let actions = buf.actions.select(Axis(0), chunk);
            let old = buf.log_probs.select(Axis(0), chunk);
            let a = adv.select(Axis(0), chunk);
            let r = ret.select(Axis(0), chunk);
            let mb = Minibatch {
                obs: obs.view(),
                actions: actions.view(),
                old_log_probs: old.view(),
                advantages: a.view(),
                returns: r.view(),
            };
            let (terms, mut grad) = ppo_loss_grad(params, &mb, cfg)?;
            if !total_loss(&terms, cfg).is_finite() || !grad.is_finite() {
                (*params, *adam) = snapshot;
                return Ok(UpdateMetrics { aborted: true, ..UpdateMetrics::default() });
            }
            let gn = clip_grad_norm(&mut grad, cfg.max_grad_norm);
            adam_step(params, &grad, adam, cfg.lr)?;
            acc.loss.policy_loss += terms.policy_loss;
            acc.loss.value_loss += terms.value_loss;
            acc.loss.entropy += terms.entropy;
            acc.loss.approx_kl += terms.approx_kl;
            acc.loss.clip_fraction += terms.clip_fraction;
            acc.grad_norm += gn;
            count += 1.0;
        }
    }
    if !params.is_finite() {
        (*params, *adam) = snapshot;
        return Ok(UpdateMetrics { aborted: true, ..UpdateMetrics::default() });
    }
    let c = count.max(1.0);
    acc.loss.policy_loss /= c;
    acc.loss.value_loss /= c;
    acc.loss.entropy /= c;
    acc.loss.approx_kl /= c;
    acc.loss.clip_fraction /= c;
    acc.grad_norm /= c;
    Ok(acc)
}

/// Normalized actions that hold the level drone in hover.
pub fn hover_action(params: &DroneParams) -> Result<[f64; ACT_DIM], TrainError> {
    let cog = params.cog_body(0.0)?;
    let g_moment = cog.cross(&nalgebra::Vector3::new(0.0, 0.0, -params.weight()));
    let cmd: RotorCommand = allocate(params.weight(), 0.0, &(-g_moment), 0.0, params)?;
    Ok(cmd.to_normalized(params.thrust_max))
}

impl From<crate::dynamics::DynamicsError> for TrainError {
    fn from(e: crate::dynamics::DynamicsError) -> Self {
        TrainError::Control(ControlError::Dynamics(e))
    }
}

/// One row of the training metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationStats {
    pub update: u64,
    pub env_steps: u64,
    /// Mean unscaled return of the episodes that finished in this rollout
    /// (NaN if none did).
    pub mean_episode_reward: f64,
    pub episodes: usize,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub aborted: bool,
}

/// Owns the policy, optimizer and env population between phases.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainerConfig,
    pub params: MlpParams,
    pub adam: AdamState,
    pub venv: VecEnv,
    pub env_steps: u64,
    pub updates: u64,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(
        cfg: TrainerConfig,
        env_cfg: EnvConfig,
        nominal: DroneParams,
        ranges: RandomizationRanges,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = MlpParams::init(OBS_DIM, cfg.hidden, ACT_DIM, &mut rng);
        params.log_std_mut().fill(cfg.init_std.max(policy::STD_FLOOR).ln());
        if cfg.hover_bias {
            params.set_action_bias(&hover_action(&nominal)?);
        }
        let venv = VecEnv::new(env_cfg, nominal, ranges, cfg.n_envs, cfg.seed)?;
        let adam = AdamState::new(params.len());
        Ok(Self { cfg, params, adam, venv, env_steps: 0, updates: 0, rng })
    }

    pub fn done(&self) -> bool {
        self.env_steps >= self.cfg.total_steps
    }

    /// Collect one rollout and run one PPO update on it.
    pub fn iterate(&mut self) -> Result<(IterationStats, Vec<EpisodeStat>), TrainError> {
        let (buf, episodes) = collect(
            &mut self.venv,
            &self.params,
            self.cfg.rollout_len,
            self.cfg.reward_scale,
            self.cfg.gamma,
            &mut self.rng,
        )?;
        let mut cfg = self.cfg.clone();
        if cfg.lr_anneal {
            cfg.lr *= (1.0 - self.env_steps as f64 / cfg.total_steps as f64).max(0.05);
        }
        self.env_steps += buf.len() as u64;
        let m = ppo_update(&mut self.params, &mut self.adam, &buf, &cfg, &mut self.rng)?;
        self.updates += 1;
        let mean = if episodes.is_empty() {
            f64::NAN
        } else {
            episodes.iter().map(|e| e.ret).sum::<f64>() / episodes.len() as f64
        };
        let stats = IterationStats {
            update: self.updates,
            env_steps: self.env_steps,
            mean_episode_reward: mean,
            episodes: episodes.len(),
            policy_loss: m.loss.policy_loss,
            value_loss: m.loss.value_loss,
            entropy: m.loss.entropy,
            approx_kl: m.loss.approx_kl,
            clip_fraction: m.loss.clip_fraction,
            grad_norm: m.grad_norm,
            aborted: m.aborted,
        };
        Ok((stats, episodes))
    }

    /// Run to the step budget, handing each iteration to `on_iter`.
    pub fn train(&mut self, mut on_iter: impl FnMut(&IterationStats)) -> Result<Vec<IterationStats>, TrainError> {
        let mut log = Vec::new();
        while !self.done() {
            let (s, _) = self.iterate()?;
            on_iter(&s);
            log.push(s);
        }
        Ok(log)
    }
}
