//! Quasi-decoupling nominal controller: the static balance gives the desired
//! pitch for the current tilt, and a position → attitude → rate cascade plus
//! thrust allocation tracks it.

pub mod allocation;
pub mod quasi_decoupling;

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{nose_up, DroneParams, DynamicsError, RotorCommand, GRAVITY};
use crate::envs::Observation;

pub use allocation::{allocate, allocate_saturating};
pub use quasi_decoupling::{hover_pitch, solve_theta_des, EquationForm, QuasiDecouplingSolution};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("balance solver did not converge at alpha={alpha}")]
    NonConvergence { alpha: f64 },
    #[error("no equilibrium within thrust limits at alpha={alpha} (f1={f1}, f2={f2})")]
    InfeasibleEquilibrium { alpha: f64, f1: f64, f2: f64 },
    #[error("wrench cannot be allocated, residual {residual}")]
    UnallocatableWrench { residual: f64 },
    #[error("non-finite controller input")]
    NonFinite,
    #[error("invalid gains: {0}")]
    InvalidGains(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CascadeGains {
    pub pos_kp: Vector3<f64>,
    pub pos_ki: Vector3<f64>,
    pub pos_kd: Vector3<f64>,
    /// Integrator clamp, m·s.
    pub pos_i_limit: f64,
    /// Per-axis acceleration set-point limit, m/s².
    pub accel_limit: f64,
    /// Largest attitude correction away from the equilibrium pose, rad.
    pub max_tilt_correction: f64,
    pub att_kp: Vector3<f64>,
    /// Body-rate set-point limit, rad/s.
    pub rate_limit: f64,
    pub rate_kp: Vector3<f64>,
    pub rate_ki: Vector3<f64>,
    pub rate_kd: Vector3<f64>,
    /// Integrator clamp, rad.
    pub rate_i_limit: f64,
    /// Moment set-point limit, N·m.
    pub moment_limit: f64,
}

impl Default for CascadeGains {
    fn default() -> Self {
        Self {
            pos_kp: Vector3::new(2.0, 2.0, 4.0),
            pos_ki: Vector3::new(0.0, 0.0, 0.0),
            pos_kd: Vector3::new(3.0, 3.0, 4.0),
            pos_i_limit: 0.5,
            accel_limit: 6.0,
            max_tilt_correction: 35f64.to_radians(),
            att_kp: Vector3::new(6.0, 6.0, 3.0),
            rate_limit: 4.0,
            rate_kp: Vector3::new(0.3, 0.3, 0.15),
            rate_ki: Vector3::new(0.3, 0.3, 0.15),
            rate_kd: Vector3::new(0.0, 0.0, 0.0),
            rate_i_limit: 1.0,
            moment_limit: 4.0,
        }
    }
}

impl CascadeGains {
    pub fn validate(&self) -> Result<(), ControlError> {
        let vecs = [
            self.pos_kp, self.pos_ki, self.pos_kd, self.att_kp, self.rate_kp, self.rate_ki,
            self.rate_kd,
        ];
        if vecs.iter().any(|v| v.iter().any(|g| !(g.is_finite() && *g >= 0.0))) {
            return Err(ControlError::InvalidGains("gains must be finite and >= 0"));
        }
        let limits = [
            self.pos_i_limit,
            self.accel_limit,
            self.max_tilt_correction,
            self.rate_limit,
            self.rate_i_limit,
            self.moment_limit,
        ];
        if limits.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(ControlError::InvalidGains("limits must be > 0"));
        }
        Ok(())
    }
}

/// Integrators and previous errors of the cascade stages.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ControllerState {
    pub pos_integral: Vector3<f64>,
    pub rate_integral: Vector3<f64>,
    pub prev_rate_error: Option<Vector3<f64>>,
}

impl ControllerState {
    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

/// Observation re-expressed in the heading frame: the goal frame with its
/// pitch undone, so gravity is along +z.
#[derive(Debug, Clone, Copy)]
pub struct HeadingFrame {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub attitude: UnitQuaternion<f64>,
}

impl HeadingFrame {
    pub fn from_observation(obs: &Observation, goal_pitch: f64) -> Self {
        let g = nose_up(goal_pitch);
        Self {
            position: g * obs.p,
            velocity: g * obs.v,
            attitude: g * obs.q,
        }
    }
}

/// Position PID in the heading frame. Returns the acceleration set-point
/// (gravity excluded) and the desired attitude: the equilibrium pitch
/// `theta_des` composed with the tilt that points the thrust along the
/// demanded force.
pub fn position_control(
    obs: &Observation,
    theta_des: f64,
    goal_pitch: f64,
    gains: &CascadeGains,
    state: &mut ControllerState,
    dt: f64,
) -> (Vector3<f64>, UnitQuaternion<f64>) {
    let h = HeadingFrame::from_observation(obs, goal_pitch);
    state.pos_integral = (state.pos_integral + h.position * dt)
        .map(|i| i.clamp(-gains.pos_i_limit, gains.pos_i_limit));
    let accel = -(gains.pos_kp.component_mul(&h.position)
        + gains.pos_ki.component_mul(&state.pos_integral)
        + gains.pos_kd.component_mul(&h.velocity));
    let accel = accel.map(|a| a.clamp(-gains.accel_limit, gains.accel_limit));
    let q_des = tilt_correction(&accel, gains.max_tilt_correction) * nose_up(theta_des);
    (accel, q_des)
}

/// Rotation taking +z onto the direction of `accel + g z`, limited in angle.
fn tilt_correction(accel: &Vector3<f64>, max_angle: f64) -> UnitQuaternion<f64> {
    let f = accel + Vector3::new(0.0, 0.0, GRAVITY);
    match UnitQuaternion::rotation_between(&Vector3::z(), &f) {
        Some(q) if q.angle() > max_angle => {
            UnitQuaternion::from_scaled_axis(q.scaled_axis() * (max_angle / q.angle()))
        }
        Some(q) => q,
        // pointing straight down: no meaningful correction
        None => UnitQuaternion::identity(),
    }
}

/// Proportional law on the error quaternion's vector part, shortest way.
pub fn attitude_control(
    q: &UnitQuaternion<f64>,
    q_des: &UnitQuaternion<f64>,
    gains: &CascadeGains,
) -> Vector3<f64> {
    let err = q.inverse() * q_des;
    let sign = if err.w < 0.0 { -1.0 } else { 1.0 };
    let rate = 2.0 * sign * gains.att_kp.component_mul(&err.imag());
    rate.map(|r| r.clamp(-gains.rate_limit, gains.rate_limit))
}

/// Body-rate PID; returns the moment set-point about the CoG in N·m.
pub fn rate_control(
    omega: &Vector3<f64>,
    omega_des: &Vector3<f64>,
    gains: &CascadeGains,
    state: &mut ControllerState,
    dt: f64,
) -> Vector3<f64> {
    let err = omega_des - omega;
    state.rate_integral =
        (state.rate_integral + err * dt).map(|i| i.clamp(-gains.rate_i_limit, gains.rate_i_limit));
    let deriv = match state.prev_rate_error {
        Some(prev) => (err - prev) / dt,
        None => Vector3::zeros(),
    };
    state.prev_rate_error = Some(err);
    let m = gains.rate_kp.component_mul(&err)
        + gains.rate_ki.component_mul(&state.rate_integral)
        + gains.rate_kd.component_mul(&deriv);
    m.map(|x| x.clamp(-gains.moment_limit, gains.moment_limit))
}

/// Full cascade bound to one drone model.
#[derive(Debug, Clone)]
pub struct NominalController {
    pub params: DroneParams,
    pub gains: CascadeGains,
    pub form: EquationForm,
    pub state: ControllerState,
    cache: Option<(f64, f64)>,
}

impl NominalController {
    pub fn new(params: DroneParams, gains: CascadeGains) -> Self {
        Self {
            params,
            gains,
            form: EquationForm::Corrected,
            state: ControllerState::default(),
            cache: None,
        }
    }

    pub fn reset(&mut self) {
        self.state.reset();
    }

    /// Equilibrium pitch for tilt `alpha`, memoized on the last tilt.
    pub fn theta_des(&mut self, alpha: f64) -> Result<f64, ControlError> {
        if let Some((a, th)) = self.cache {
            if a == alpha {
                return Ok(th);
            }
        }
        let th = hover_pitch(alpha, &self.params, self.form)?.theta_des;
        self.cache = Some((alpha, th));
        Ok(th)
    }

    /// One control step. `goal_pitch` is the pitch of the goal frame the
    /// observation is expressed in.
    pub fn act(
        &mut self,
        obs: &Observation,
        goal_pitch: f64,
        dt: f64,
    ) -> Result<RotorCommand, ControlError> {
        if !obs.is_finite() {
            return Err(ControlError::NonFinite);
        }
        let alpha = obs.alpha.clamp(0.0, crate::dynamics::ALPHA_MAX);
        let theta_des = self.theta_des(alpha)?;
        let (accel, q_des) =
            position_control(obs, theta_des, goal_pitch, &self.gains, &mut self.state, dt);
        let h = HeadingFrame::from_observation(obs, goal_pitch);
        let rate_sp = attitude_control(&h.attitude, &q_des, &self.gains);
        let omega_body = obs.q.inverse() * obs.w;
        let moment_cog = rate_control(&omega_body, &rate_sp, &self.gains, &mut self.state, dt);

        let m = self.params.mass;
        let force_h = m * (accel + Vector3::new(0.0, 0.0, GRAVITY));
        let force_b = h.attitude.inverse() * force_h;
        let cog = self.params.cog_body(alpha)?;
        Ok(allocate_saturating(
            force_b.z,
            force_b.x,
            &moment_cog,
            &cog,
            alpha,
            &self.params,
        ))
    }
}
