//! Hover environments: goal-frame observations, the per-term reward, episode
//! lifecycle and domain randomization over a vectorized population.

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    self, wall_effect, DroneParams, DynamicsError, RigidBodyState, RotorCommand, WallModel,
    ALPHA_MAX, NUM_ROTORS,
};
use crate::nominal::{hover_pitch, ControlError, EquationForm};

pub const OBS_DIM: usize = 14;
pub const ACT_DIM: usize = NUM_ROTORS;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("batch size mismatch: expected {expected}, got {got}")]
    BatchMismatch { expected: usize, got: usize },
    #[error("observation must have {OBS_DIM} entries, got {0}")]
    BadObservation(usize),
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Control(#[from] ControlError),
}

/// Goal-frame observation: position, attitude, velocity and angular velocity
/// relative to the goal frame, plus the current tilt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub p: Vector3<f64>,
    pub q: UnitQuaternion<f64>,
    pub v: Vector3<f64>,
    pub w: Vector3<f64>,
    pub alpha: f64,
}

impl Observation {
    /// `[p, q(w,x,y,z), v, w, alpha]`
    pub fn to_array(&self) -> [f64; OBS_DIM] {
        let q = self.q.quaternion();
        [
            self.p.x, self.p.y, self.p.z, q.w, q.i, q.j, q.k, self.v.x, self.v.y, self.v.z,
            self.w.x, self.w.y, self.w.z, self.alpha,
        ]
    }

    /// Inverse of [`Observation::to_array`]; the quaternion is renormalized.
    pub fn from_slice(x: &[f64]) -> Result<Self, EnvError> {
        if x.len() != OBS_DIM {
            return Err(EnvError::BadObservation(x.len()));
        }
        let q = nalgebra::Quaternion::new(x[3], x[4], x[5], x[6]);
        let q = if q.norm() > 1e-12 {
            UnitQuaternion::from_quaternion(q)
        } else {
            UnitQuaternion::identity()
        };
        Ok(Self {
            p: Vector3::new(x[0], x[1], x[2]),
            q,
            v: Vector3::new(x[7], x[8], x[9]),
            w: Vector3::new(x[10], x[11], x[12]),
            alpha: x[13],
        })
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GoalFrame {
    pub position: Vector3<f64>,
    pub yaw: f64,
    /// Nose-up pitch of the goal frame, set to the hover pitch of the tilt.
    pub pitch_goal: f64,
}

impl GoalFrame {
    pub fn attitude(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), self.yaw) * dynamics::nose_up(self.pitch_goal)
    }

    /// Inertial state whose observation is `obs` (inverse of [`observe`]).
    pub fn to_inertial(&self, obs: &Observation) -> RigidBodyState {
        let g = self.attitude();
        let attitude = g * obs.q;
        RigidBodyState {
            position: self.position + g * obs.p,
            attitude,
            lin_vel: g * obs.v,
            ang_vel: attitude.inverse() * (g * obs.w),
            tilt_alpha: obs.alpha,
            tilt_target: obs.alpha,
        }
    }
}

pub fn observe(state: &RigidBodyState, goal: &GoalFrame) -> Observation {
    let g_inv = goal.attitude().inverse();
    let q = g_inv * state.attitude;
    Observation {
        p: g_inv * (state.position - goal.position),
        q,
        v: g_inv * state.lin_vel,
        w: q * state.ang_vel,
        alpha: state.tilt_alpha,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_p: f64,
    pub r_q: f64,
    pub r_v: f64,
    pub r_w: f64,
    pub total: f64,
}

/// `1/(1+|k|)` per term; the attitude term uses the vector part of the
/// shortest error quaternion.
pub fn reward(obs: &Observation) -> RewardBreakdown {
    let term = |n: f64| 1.0 / (1.0 + n);
    let r_p = term(obs.p.norm());
    let r_q = term(obs.q.imag().norm());
    let r_v = term(obs.v.norm());
    let r_w = term(obs.w.norm());
    RewardBreakdown {
        r_p,
        r_q,
        r_v,
        r_w,
        total: r_p + r_q + r_v + r_w,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn point(x: f64) -> Self {
        Self { lo: x, hi: x }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomizationRanges {
    pub mass: Interval,
    pub l0: Interval,
    pub l1: Interval,
    pub l2: Interval,
    pub cog_x: Interval,
    pub cog_y: Interval,
    pub cog_z: Interval,
    pub inertia_scale: Interval,
    /// Tilt task range, rad.
    pub alpha_set: Interval,
    pub randomize_fraction: f64,
    /// Global environment steps between re-rolls; 0 disables re-rolling.
    pub period_steps: u64,
}

impl Default for RandomizationRanges {
    fn default() -> Self {
        Self {
            mass: Interval::new(3.2, 3.6),
            l0: Interval::new(0.080, 0.090),
            l1: Interval::new(0.170, 0.190),
            l2: Interval::new(0.270, 0.300),
            cog_x: Interval::new(0.040, 0.065),
            cog_y: Interval::new(-0.010, 0.010),
            cog_z: Interval::new(0.003, 0.015),
            inertia_scale: Interval::new(0.85, 1.15),
            alpha_set: Interval::new(0.0, ALPHA_MAX),
            randomize_fraction: 0.5,
            period_steps: 1000,
        }
    }
}

impl RandomizationRanges {
    /// Ranges collapsed onto the given parameters.
    pub fn collapsed(p: &DroneParams) -> Self {
        Self {
            mass: Interval::point(p.mass),
            l0: Interval::point(p.l0),
            l1: Interval::point(p.l1),
            l2: Interval::point(p.l2),
            cog_x: Interval::point(p.cog_nominal.x),
            cog_y: Interval::point(p.cog_nominal.y),
            cog_z: Interval::point(p.cog_nominal.z),
            inertia_scale: Interval::point(1.0),
            alpha_set: Interval::point(0.0),
            ..Self::default()
        }
    }

    pub fn validate(&self, nominal: &DroneParams) -> Result<(), EnvError> {
        let checks = [
            ("mass", self.mass, nominal.mass),
            ("l0", self.l0, nominal.l0),
            ("l1", self.l1, nominal.l1),
            ("l2", self.l2, nominal.l2),
            ("cog_x", self.cog_x, nominal.cog_nominal.x),
            ("cog_y", self.cog_y, nominal.cog_nominal.y),
            ("cog_z", self.cog_z, nominal.cog_nominal.z),
            ("inertia_scale", self.inertia_scale, 1.0),
        ];
        for (name, iv, nom) in checks {
            if !(iv.lo.is_finite() && iv.hi.is_finite() && iv.lo <= iv.hi) {
                return Err(EnvError::InvalidConfig(format!("range `{name}` is not an interval")));
            }
            if !iv.contains(nom) {
                return Err(EnvError::InvalidConfig(format!(
                    "range `{name}` [{}, {}] excludes the nominal value {nom}",
                    iv.lo, iv.hi
                )));
            }
        }
        if !(self.alpha_set.lo >= 0.0 && self.alpha_set.hi <= ALPHA_MAX + 1e-12 && self.alpha_set.lo <= self.alpha_set.hi) {
            return Err(EnvError::InvalidConfig("alpha_set must lie in [0, 110 deg]".into()));
        }
        if !(0.0..=1.0).contains(&self.randomize_fraction) {
            return Err(EnvError::InvalidConfig("randomize_fraction must lie in [0, 1]".into()));
        }
        if self.mass.lo <= 0.0 || self.l0.lo <= 0.0 || self.l1.lo <= 0.0 || self.l2.lo <= 0.0 || self.inertia_scale.lo <= 0.0 {
            return Err(EnvError::InvalidConfig("masses, lengths and inertia scale must stay positive".into()));
        }
        Ok(())
    }
}

/// Draw a randomized drone and a tilt task.
pub fn randomize(
    nominal: &DroneParams,
    ranges: &RandomizationRanges,
    rng: &mut impl Rng,
) -> (DroneParams, f64) {
    let mut p = *nominal;
    p.mass = ranges.mass.sample(rng);
    p.l0 = ranges.l0.sample(rng);
    p.l1 = ranges.l1.sample(rng);
    p.l2 = ranges.l2.sample(rng);
    p.cog_nominal = Vector3::new(
        ranges.cog_x.sample(rng),
        ranges.cog_y.sample(rng),
        ranges.cog_z.sample(rng),
    );
    p.inertia_diag = nominal.inertia_diag * ranges.inertia_scale.sample(rng);
    let alpha = ranges.alpha_set.sample(rng);
    (p, alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub episode_len: usize,
    pub dt: f64,
    /// Half-width of the initial position box around the goal, m.
    pub init_pos: f64,
    /// Initial roll/pitch bound relative to the goal attitude, rad.
    pub init_tilt: f64,
    pub init_lin_vel: f64,
    pub init_ang_vel: f64,
    /// Early termination when the position error norm exceeds this, m.
    pub term_pos: f64,
    /// Early termination when the attitude error exceeds this angle, rad.
    pub term_att: f64,
    pub equations: EquationForm,
    pub wall: Option<WallModel>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            episode_len: 500,
            dt: 0.01,
            init_pos: 0.5,
            init_tilt: 30f64.to_radians(),
            init_lin_vel: 0.2,
            init_ang_vel: 0.2,
            term_pos: 4.0,
            term_att: 90f64.to_radians(),
            equations: EquationForm::Corrected,
            wall: None,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.episode_len == 0 {
            return Err(EnvError::InvalidConfig("episode_len must be > 0".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(EnvError::InvalidConfig("dt must be > 0".into()));
        }
        let bounds = [self.init_pos, self.init_tilt, self.init_lin_vel, self.init_ang_vel];
        if bounds.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(EnvError::InvalidConfig("initial-state bounds must be >= 0".into()));
        }
        if !(self.term_pos > 0.0 && self.term_att > 0.0) {
            return Err(EnvError::InvalidConfig("termination bounds must be > 0".into()));
        }
        if let Some(w) = &self.wall {
            if !(w.decay_length > 0.0) {
                return Err(EnvError::InvalidConfig("wall decay_length must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// Outcome of one environment step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub reward: RewardBreakdown,
    pub done: bool,
    /// Ended by the failure bounds rather than the step limit.
    pub terminated: bool,
    /// Undiscounted return and length of the episode that just ended.
    pub episode: Option<(f64, usize)>,
    pub alpha_task: f64,
    /// Observation reached by the last step of a finished episode, before
    /// the automatic reset.
    pub final_obs: Option<Observation>,
}

/// One drone and its episode bookkeeping.
#[derive(Debug, Clone)]
pub struct Env {
    pub cfg: EnvConfig,
    pub nominal: DroneParams,
    pub params: DroneParams,
    pub state: RigidBodyState,
    pub goal: GoalFrame,
    pub alpha_task: f64,
    pub randomized: bool,
    pub steps: usize,
    pub episode_return: f64,
    rng: ChaCha8Rng,
}

impl Env {
    pub fn new(cfg: EnvConfig, nominal: DroneParams, seed: u64, stream: u64) -> Result<Self, EnvError> {
        cfg.validate()?;
        nominal.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut env = Self {
            cfg,
            nominal,
            params: nominal,
            state: RigidBodyState::default(),
            goal: GoalFrame::default(),
            alpha_task: 0.0,
            randomized: false,
            steps: 0,
            episode_return: 0.0,
            rng,
        };
        env.reset();
        Ok(env)
    }

    /// Switch the hover task to tilt `alpha`; the goal pitch follows and the
    /// servo starts slewing.
    pub fn set_task(&mut self, params: DroneParams, alpha: f64) -> Result<(), EnvError> {
        let alpha = alpha.clamp(0.0, ALPHA_MAX);
        let pitch = hover_pitch(alpha, &self.nominal, self.cfg.equations)?.theta_des;
        self.params = params;
        self.alpha_task = alpha;
        self.goal.pitch_goal = pitch;
        self.state.tilt_target = alpha;
        Ok(())
    }

    pub fn reroll(&mut self, ranges: &RandomizationRanges) -> Result<(), EnvError> {
        let (p, alpha) = randomize(&self.nominal, ranges, &mut self.rng);
        self.set_task(p, alpha)
    }

    pub fn observe(&self) -> Observation {
        observe(&self.state, &self.goal)
    }

    /// Sample an initial state around the goal.
    pub fn reset(&mut self) -> Observation {
        let c = self.cfg;
        let rng = &mut self.rng;
        let mut sym = |b: f64| if b > 0.0 { rng.random_range(-b..=b) } else { 0.0 };
        let p = Vector3::new(sym(c.init_pos), sym(c.init_pos), sym(c.init_pos));
        let roll = sym(c.init_tilt);
        let pitch = sym(c.init_tilt);
        let v = Vector3::new(sym(c.init_lin_vel), sym(c.init_lin_vel), sym(c.init_lin_vel));
        let w = Vector3::new(sym(c.init_ang_vel), sym(c.init_ang_vel), sym(c.init_ang_vel));
        let g = self.goal.attitude();
        let attitude = g * UnitQuaternion::from_euler_angles(roll, pitch, 0.0);
        self.state = RigidBodyState {
            position: self.goal.position + g * p,
            attitude,
            lin_vel: g * v,
            ang_vel: w,
            tilt_alpha: self.alpha_task,
            tilt_target: self.alpha_task,
        };
        self.steps = 0;
        self.episode_return = 0.0;
        self.observe()
    }

    fn failed(&self, obs: &Observation) -> bool {
        obs.p.norm() > self.cfg.term_pos || obs.q.angle() > self.cfg.term_att
    }

    /// Apply a normalized action in `[-1, 1]^6`. On episode end the env
    /// resets itself and the returned observation is the new initial one.
    pub fn step(&mut self, action: &[f64]) -> Result<(Observation, StepInfo), EnvError> {
        if action.len() != ACT_DIM {
            return Err(EnvError::BatchMismatch { expected: ACT_DIM, got: action.len() });
        }
        let cmd = RotorCommand::from_normalized(action, self.params.thrust_max);
        self.step_command(&cmd)
    }

    pub fn step_command(&mut self, cmd: &RotorCommand) -> Result<(Observation, StepInfo), EnvError> {
        let disturbance = match &self.cfg.wall {
            Some(w) => wall_effect(&self.state, w, self.params.mass),
            None => Vector3::zeros(),
        };
        let next = dynamics::step(&self.state, cmd, &self.params, self.cfg.dt, &disturbance);
        let (obs, terminated) = match next {
            Ok(s) => {
                self.state = s;
                let obs = self.observe();
                (obs, self.failed(&obs))
            }
            // a blown-up state ends the episode like any other failure
            Err(DynamicsError::SimulationFault) => (self.observe(), true),
            Err(e) => return Err(e.into()),
        };
        let r = if obs.is_finite() {
            reward(&obs)
        } else {
            RewardBreakdown { r_p: 0.0, r_q: 0.0, r_v: 0.0, r_w: 0.0, total: 0.0 }
        };
        self.steps += 1;
        self.episode_return += r.total;
        let done = terminated || self.steps >= self.cfg.episode_len;
        let info = StepInfo {
            reward: r,
            done,
            terminated,
            episode: done.then_some((self.episode_return, self.steps)),
            alpha_task: self.alpha_task,
            final_obs: done.then_some(obs),
        };
        let obs = if done { self.reset() } else { obs };
        Ok((obs, info))
    }
}

/// Result of a vectorized step, one entry per environment.
#[derive(Debug, Clone, Default)]
pub struct VecStep {
    pub obs: Vec<Observation>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub infos: Vec<StepInfo>,
}

/// Population of environments stepped in lockstep. The first
/// `randomize_fraction` of them are randomized; the rest hover the nominal
/// drone at zero tilt.
#[derive(Debug, Clone)]
pub struct VecEnv {
    pub envs: Vec<Env>,
    pub ranges: RandomizationRanges,
    pub global_step: u64,
}

impl VecEnv {
    pub fn new(
        cfg: EnvConfig,
        nominal: DroneParams,
        ranges: RandomizationRanges,
        n: usize,
        seed: u64,
    ) -> Result<Self, EnvError> {
        ranges.validate(&nominal)?;
        let n_rand = (n as f64 * ranges.randomize_fraction).floor() as usize;
        let mut envs = Vec::with_capacity(n);
        for i in 0..n {
            let mut env = Env::new(cfg, nominal, seed, i as u64)?;
            if i < n_rand {
                env.randomized = true;
                env.reroll(&ranges)?;
                env.reset();
            }
            envs.push(env);
        }
        Ok(Self { envs, ranges, global_step: 0 })
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn observations(&self) -> Vec<Observation> {
        self.envs.iter().map(Env::observe).collect()
    }

    pub fn vec_step(&mut self, actions: &[[f64; ACT_DIM]]) -> Result<VecStep, EnvError> {
        if actions.len() != self.envs.len() {
            return Err(EnvError::BatchMismatch { expected: self.envs.len(), got: actions.len() });
        }
        let results: Vec<Result<(Observation, StepInfo), EnvError>> = self
            .envs
            .par_iter_mut()
            .zip(actions.par_iter())
            .map(|(env, a)| env.step(a))
            .collect();
        self.global_step += 1;
        let reroll = self.ranges.period_steps > 0 && self.global_step.is_multiple_of(self.ranges.period_steps);

        let mut out = VecStep {
            obs: Vec::with_capacity(results.len()),
            rewards: Vec::with_capacity(results.len()),
            dones: Vec::with_capacity(results.len()),
            infos: Vec::with_capacity(results.len()),
        };
        for r in results {
            let (obs, info) = r?;
            out.obs.push(obs);
            out.rewards.push(info.reward.total);
            out.dones.push(info.done);
            out.infos.push(info);
        }
        if reroll {
            for (i, env) in self.envs.iter_mut().enumerate() {
                if env.randomized {
                    env.reroll(&self.ranges)?;
                    out.obs[i] = env.observe();
                }
            }
        }
        Ok(out)
    }
}
