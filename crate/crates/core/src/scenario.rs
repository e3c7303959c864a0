//! Evaluation scenarios: hover modes, lemniscate tracking and the wall
//! climb, flown by the nominal controller, the bare policy or the mixer.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{AnalysisError, TrackingErrorSeries};
use crate::dynamics::{nose_up_pitch, DroneParams, WallModel, GRAVITY};
use crate::envs::{Env, EnvConfig, EnvError, Observation, ACT_DIM};
use crate::mixer::{self, MixerConfig, MixerError};
use crate::nominal::{CascadeGains, ControlError, NominalController};
use crate::policy::{self, MlpParams, PolicyError};
use crate::stability::{self, LyapunovSample, StabilityError, StabilityReport};

/// Samples before this time are excluded from the stability window.
pub const TRANSIENT_CUTOFF: f64 = 2.0;
/// Tolerance on `vdot` for a sample to count as decreasing.
pub const VDOT_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("controller {0:?} needs a policy checkpoint")]
    MissingPolicy(ControllerKind),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Mixer(#[from] MixerError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Stability(#[from] StabilityError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    HoverRegular,
    HoverTilted,
    HoverNearWall,
    Lemniscate,
    WallClimb,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 5] = [
        ScenarioKind::HoverRegular,
        ScenarioKind::HoverTilted,
        ScenarioKind::HoverNearWall,
        ScenarioKind::Lemniscate,
        ScenarioKind::WallClimb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::HoverRegular => "hover_regular",
            ScenarioKind::HoverTilted => "hover_tilted",
            ScenarioKind::HoverNearWall => "hover_near_wall",
            ScenarioKind::Lemniscate => "lemniscate",
            ScenarioKind::WallClimb => "wall_climb",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Nominal,
    /// Policy mean applied directly, no mixing.
    Ppo,
    /// Nominal and policy actions blended by the mixer.
    Retro,
}

impl ControllerKind {
    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Nominal => "nominal",
            ControllerKind::Ppo => "ppo",
            ControllerKind::Retro => "retro",
        }
    }

    pub fn needs_policy(self) -> bool {
        !matches!(self, ControllerKind::Nominal)
    }
}

/// Gerono lemniscate `x = A sin(2πt/T)`, `y = B sin(4πt/T)` about the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LemniscateParams {
    pub half_width: f64,
    pub half_height: f64,
    pub period: f64,
    pub alpha_deg: f64,
}

impl Default for LemniscateParams {
    fn default() -> Self {
        Self { half_width: 1.0, half_height: 0.5, period: 20.0, alpha_deg: 110.0 }
    }
}

impl LemniscateParams {
    pub fn point(&self, t: f64) -> Vector3<f64> {
        let w = 2.0 * PI * t / self.period;
        Vector3::new(self.half_width * w.sin(), self.half_height * (2.0 * w).sin(), 0.0)
    }
}

/// Free hover, transition towards the wall while tilting, vertical climb,
/// final hold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WallClimbParams {
    /// Start distance from the wall plane, m.
    pub start_distance: f64,
    /// Stand-off distance at the end of the approach, m.
    pub standoff: f64,
    pub climb_height: f64,
    pub alpha_deg: f64,
    pub hover_time: f64,
    pub approach_time: f64,
    pub climb_time: f64,
    pub hold_time: f64,
}

impl Default for WallClimbParams {
    fn default() -> Self {
        Self {
            start_distance: 1.0,
            standoff: 0.3,
            climb_height: 1.5,
            alpha_deg: 110.0,
            hover_time: 2.0,
            approach_time: 6.0,
            climb_time: 6.0,
            hold_time: 2.0,
        }
    }
}

impl WallClimbParams {
    pub fn duration(&self) -> f64 {
        self.hover_time + self.approach_time + self.climb_time + self.hold_time
    }
}

/// One evaluation scenario and the controller flying it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub controller: ControllerKind,
    /// Seconds; 0 means the scenario's natural length.
    pub duration: f64,
    pub wall_enabled: bool,
    pub wall: WallModel,
    /// Rate at which the controller is re-evaluated; actions are held in
    /// between. Values at or above the simulation rate act every step.
    pub control_rate_hz: f64,
    pub tilted_alpha_deg: f64,
    /// Initial position offset from the goal, goal frame, m.
    pub init_offset: [f64; 3],
    /// Half-width of the seeded uniform jitter on the initial position, m.
    pub init_jitter: f64,
    pub lemniscate: LemniscateParams,
    pub wall_climb: WallClimbParams,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            kind: ScenarioKind::HoverRegular,
            controller: ControllerKind::Nominal,
            duration: 0.0,
            wall_enabled: false,
            wall: WallModel::default(),
            control_rate_hz: 100.0,
            tilted_alpha_deg: 110.0,
            init_offset: [0.0; 3],
            init_jitter: 0.05,
            lemniscate: LemniscateParams::default(),
            wall_climb: WallClimbParams::default(),
        }
    }
}

impl ScenarioSpec {
    /// Defaults for `kind`: the wall is on for the near-wall hover and the
    /// climb.
    pub fn new(kind: ScenarioKind, controller: ControllerKind) -> Self {
        let wall_enabled = matches!(kind, ScenarioKind::HoverNearWall | ScenarioKind::WallClimb);
        Self { kind, controller, wall_enabled, ..Self::default() }
    }

    /// Real platform rate: the controller runs at 30 Hz.
    pub fn hold_30hz(mut self) -> Self {
        self.control_rate_hz = 30.0;
        self
    }

    pub fn effective_duration(&self) -> f64 {
        if self.duration > 0.0 {
            return self.duration;
        }
        match self.kind {
            ScenarioKind::Lemniscate => self.lemniscate.period,
            ScenarioKind::WallClimb => self.wall_climb.duration(),
            _ => 5.0,
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::Invalid(m.into()));
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return bad("duration must be >= 0 (0 selects the natural length)");
        }
        if !(self.control_rate_hz > 0.0) {
            return bad("control_rate_hz must be > 0");
        }
        let l = &self.lemniscate;
        if !(l.half_width > 0.0 && l.half_height > 0.0 && l.period > 0.0) {
            return bad("lemniscate half_width, half_height and period must be > 0");
        }
        let w = &self.wall_climb;
        let times = [w.hover_time, w.approach_time, w.climb_time, w.hold_time];
        if times.iter().any(|t| !(*t >= 0.0)) || w.duration() <= 0.0 {
            return bad("wall_climb phase times must be >= 0 with a positive total");
        }
        if !(w.standoff > 0.0 && w.start_distance >= w.standoff) {
            return bad("wall_climb needs 0 < standoff <= start_distance");
        }
        if !(self.init_jitter >= 0.0) {
            return bad("init_jitter must be >= 0");
        }
        if !(self.wall.decay_length > 0.0) {
            return bad("wall decay_length must be > 0");
        }
        Ok(())
    }

    /// Goal position and tilt at time `t`.
    pub fn goal(&self, t: f64) -> (Vector3<f64>, f64) {
        let tilted = self.tilted_alpha_deg.to_radians();
        match self.kind {
            ScenarioKind::HoverRegular => (Vector3::zeros(), 0.0),
            ScenarioKind::HoverTilted | ScenarioKind::HoverNearWall => (Vector3::zeros(), tilted),
            ScenarioKind::Lemniscate => (self.lemniscate.point(t), self.lemniscate.alpha_deg.to_radians()),
            ScenarioKind::WallClimb => {
                let w = &self.wall_climb;
                let x0 = self.wall.wall_x + w.start_distance;
                let x1 = self.wall.wall_x + w.standoff;
                let alpha = w.alpha_deg.to_radians();
                let approach = ((t - w.hover_time) / w.approach_time.max(f64::EPSILON)).clamp(0.0, 1.0);
                let climb_start = w.hover_time + w.approach_time;
                let climb = ((t - climb_start) / w.climb_time.max(f64::EPSILON)).clamp(0.0, 1.0);
                (
                    Vector3::new(x0 + (x1 - x0) * approach, 0.0, w.climb_height * climb),
                    alpha * approach,
                )
            }
        }
    }
}

/// One logged control step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub t: f64,
    pub goal_x: f64,
    pub goal_y: f64,
    pub goal_z: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub pitch: f64,
    pub pitch_goal: f64,
    pub alpha: f64,
    pub pos_error: f64,
    pub pitch_error: f64,
    pub r_p: f64,
    pub r_q: f64,
    pub r_v: f64,
    pub r_w: f64,
    pub reward: f64,
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
    pub a5: f64,
    pub kl_raw: Option<f64>,
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub scenario: ScenarioKind,
    pub controller: ControllerKind,
    pub seed: u64,
    pub steps: usize,
    pub terminated: bool,
    pub episode_return: f64,
    pub position_rmse: f64,
    pub pitch_rmse: f64,
    pub mean_weight: Option<f64>,
    pub stability: Option<StabilityReport>,
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub summary: EpisodeSummary,
    pub rows: Vec<StepRow>,
    pub errors: TrackingErrorSeries,
    pub lyapunov: Vec<LyapunovSample>,
}

/// Everything needed to fly scenarios except the scenario itself.
#[derive(Debug, Clone)]
pub struct Runner<'a> {
    /// Simulated airframe.
    pub drone: DroneParams,
    /// Airframe model the nominal controller is built on.
    pub model: DroneParams,
    pub gains: CascadeGains,
    pub env: EnvConfig,
    pub mixer: MixerConfig,
    pub policy: Option<&'a MlpParams>,
}

impl<'a> Runner<'a> {
    pub fn new(policy: Option<&'a MlpParams>) -> Self {
        Self {
            drone: DroneParams::default(),
            model: DroneParams::default(),
            gains: CascadeGains::default(),
            env: EnvConfig::default(),
            mixer: MixerConfig::default(),
            policy,
        }
    }

    pub fn run(&self, spec: &ScenarioSpec, seed: u64) -> Result<EpisodeResult, ScenarioError> {
        spec.validate()?;
        let policy = match (spec.controller.needs_policy(), self.policy) {
            (true, None) => return Err(ScenarioError::MissingPolicy(spec.controller)),
            (_, p) => p,
        };
        let dt = self.env.dt;
        let duration = spec.effective_duration();
        let n_steps = (duration / dt).round().max(1.0) as usize;
        let env_cfg = EnvConfig {
            episode_len: n_steps,
            init_pos: spec.init_jitter,
            init_tilt: 0.0,
            init_lin_vel: 0.0,
            init_ang_vel: 0.0,
            wall: spec.wall_enabled.then_some(spec.wall),
            ..self.env
        };
        let mut env = Env::new(env_cfg, self.drone, seed, 0)?;
        let (goal0, alpha0) = spec.goal(0.0);
        env.goal.position = goal0;
        env.set_task(self.drone, alpha0)?;
        env.reset();
        let g = env.goal.attitude();
        env.state.position += g * Vector3::from(spec.init_offset);
        let mut obs = env.observe();

        let mut nominal = NominalController::new(self.model, self.gains.clone());
        nominal.form = self.env.equations;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let hold = (1.0 / (spec.control_rate_hz * dt)).round().max(1.0) as usize;
        let control_dt = hold as f64 * dt;

        let mut rows = Vec::with_capacity(n_steps);
        let mut errors = TrackingErrorSeries::default();
        let mut lyapunov = Vec::with_capacity(n_steps);
        let mut action = [0.0; ACT_DIM];
        let mut decision: (Option<f64>, Option<f64>) = (None, None);
        let mut terminated = false;
        let mut alpha_goal = alpha0;
        for k in 0..n_steps {
            if k % hold == 0 {
                let a0 = nominal.act(&obs, env.goal.pitch_goal, control_dt)?.to_normalized(self.model.thrust_max);
                (action, decision) = match spec.controller {
                    ControllerKind::Nominal => (a0, (None, None)),
                    ControllerKind::Ppo => {
                        let p = policy.expect("checked above");
                        (policy::forward(p, &obs.to_array())?.mean, (None, None))
                    }
                    ControllerKind::Retro => {
                        let p = policy.expect("checked above");
                        let d = mixer::mix(&obs, p, &a0, &self.mixer, &mut rng)?;
                        (d.a_hybrid, (Some(d.kl_raw), Some(d.weight)))
                    }
                };
            }
            let (next, info) = env.step(&action)?;
            let o = info.final_obs.unwrap_or(next);
            let t = (k + 1) as f64 * dt;
            let pitch = nose_up_pitch(&(env.goal.attitude() * o.q));
            let row = log_row(t, &env.goal.position, env.goal.pitch_goal, &o, pitch, &info.reward, &action, decision);
            errors.push(t, row.pos_error, row.pitch_error);
            lyapunov.push(LyapunovSample::new(t, &o.p, &o.v));
            rows.push(row);
            if info.terminated {
                terminated = true;
                break;
            }
            if info.done {
                break;
            }
            // move the goal for the next step; the observation follows it
            let (goal, alpha) = spec.goal(t);
            env.goal.position = goal;
            if alpha != alpha_goal {
                env.set_task(self.drone, alpha)?;
                alpha_goal = alpha;
            }
            obs = env.observe();
        }

        let weights: Vec<f64> = rows.iter().filter_map(|r| r.weight).collect();
        let disturbance = if spec.wall_enabled { spec.wall.effect_gain.abs() * GRAVITY } else { 0.0 };
        let stability = match stability::monitor(&lyapunov, TRANSIENT_CUTOFF, disturbance, VDOT_TOLERANCE) {
            Ok(r) => Some(r),
            Err(StabilityError::EmptyWindow { .. }) => None,
            Err(e) => return Err(e.into()),
        };
        let summary = EpisodeSummary {
            scenario: spec.kind,
            controller: spec.controller,
            seed,
            steps: rows.len(),
            terminated,
            episode_return: rows.iter().map(|r| r.reward).sum(),
            position_rmse: errors.position_rmse()?,
            pitch_rmse: errors.pitch_rmse()?,
            mean_weight: (!weights.is_empty()).then(|| weights.iter().sum::<f64>() / weights.len() as f64),
            stability,
        };
        Ok(EpisodeResult { summary, rows, errors, lyapunov })
    }
}

#[allow(clippy::too_many_arguments)]
fn log_row(
    t: f64,
    goal: &Vector3<f64>,
    pitch_goal: f64,
    o: &Observation,
    pitch: f64,
    r: &crate::envs::RewardBreakdown,
    a: &[f64; ACT_DIM],
    (kl_raw, weight): (Option<f64>, Option<f64>),
) -> StepRow {
    let pos = goal + crate::dynamics::nose_up(pitch_goal) * o.p;
    StepRow {
        t,
        goal_x: goal.x,
        goal_y: goal.y,
        goal_z: goal.z,
        x: pos.x,
        y: pos.y,
        z: pos.z,
        pitch,
        pitch_goal,
        alpha: o.alpha,
        pos_error: o.p.norm(),
        pitch_error: (pitch - pitch_goal).abs(),
        r_p: r.r_p,
        r_q: r.r_q,
        r_v: r.r_v,
        r_w: r.r_w,
        reward: r.total,
        a0: a[0],
        a1: a[1],
        a2: a[2],
        a3: a[3],
        a4: a[4],
        a5: a[5],
        kl_raw,
        weight,
    }
}
