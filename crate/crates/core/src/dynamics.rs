//! Rigid-body model of the Y-shaped coaxial tilting hexarotor.
//!
//! Frames: the inertial frame is ENU, the body frame is FLU (x forward, y left,
//! z up) with its origin on the tilting axle. The front coaxial pair sits on the
//! tilting arm at distance `l0` from the axle and its thrust axis is
//! `(sin α, 0, cos α)`. The two rear coaxial pairs sit at `(-l2, ±l1, 0)` with
//! thrust along body z.
//!
//! Pitch angles in this crate are nose-up positive (see [`nose_up`]).

use nalgebra::{Matrix6, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

pub const GRAVITY: f64 = 9.81;
pub const ALPHA_MAX: f64 = 110.0 * std::f64::consts::PI / 180.0;
pub const NUM_ROTORS: usize = 6;

/// Reaction-torque sign of each rotor; coaxial pairs counter-rotate.
pub const SPIN: [f64; NUM_ROTORS] = [1.0, -1.0, 1.0, -1.0, 1.0, -1.0];

const ALPHA_EPS: f64 = 1e-12;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("invalid drone parameter `{field}`: {reason}")]
    InvalidParams { field: &'static str, reason: String },
    #[error("tilt angle {0} rad outside [0, 110 deg]")]
    TiltOutOfRange(f64),
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("simulation fault: state became non-finite")]
    SimulationFault,
    #[error("time step must be positive, got {0}")]
    BadTimeStep(f64),
}

/// Physical parameters of the drone; the domain-randomization target.
///
/// `cog_nominal` follows the hardware table convention: x is measured *aft* of
/// the tilting axle (towards the rear rotors), y to the left and z up. Use
/// [`DroneParams::cog_body`] for FLU body-frame coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DroneParams {
    pub mass: f64,
    pub l0: f64,
    pub l1: f64,
    pub l2: f64,
    pub cog_nominal: Vector3<f64>,
    pub inertia_diag: Vector3<f64>,
    pub thrust_max: f64,
    pub servo_rate_max: f64,
    pub rotor_torque_coeff: f64,
    /// Share of the total mass carried by the tilting front assembly.
    pub tilt_mass_fraction: f64,
}

impl Default for DroneParams {
    fn default() -> Self {
        Self {
            mass: 3.475,
            l0: 0.08555,
            l1: 0.182,
            l2: 0.287,
            cog_nominal: Vector3::new(0.0552, 0.0, 0.0082),
            inertia_diag: Vector3::new(0.021, 0.022, 0.031),
            thrust_max: 19.94,
            servo_rate_max: 2.0,
            rotor_torque_coeff: 0.016,
            tilt_mass_fraction: 0.12,
        }
    }
}

impl DroneParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let positive = [
            ("mass", self.mass),
            ("l0", self.l0),
            ("l1", self.l1),
            ("l2", self.l2),
            ("thrust_max", self.thrust_max),
            ("servo_rate_max", self.servo_rate_max),
            ("inertia_diag.x", self.inertia_diag.x),
            ("inertia_diag.y", self.inertia_diag.y),
            ("inertia_diag.z", self.inertia_diag.z),
        ];
        for (field, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(DynamicsError::InvalidParams {
                    field,
                    reason: format!("must be finite and > 0, got {v}"),
                });
            }
        }
        if !self.cog_nominal.iter().all(|c| c.is_finite()) {
            return Err(DynamicsError::InvalidParams {
                field: "cog_nominal",
                reason: "must be finite".into(),
            });
        }
        if !self.rotor_torque_coeff.is_finite() {
            return Err(DynamicsError::InvalidParams {
                field: "rotor_torque_coeff",
                reason: "must be finite".into(),
            });
        }
        if !(0.0..1.0).contains(&self.tilt_mass_fraction) {
            return Err(DynamicsError::InvalidParams {
                field: "tilt_mass_fraction",
                reason: format!("must lie in [0, 1), got {}", self.tilt_mass_fraction),
            });
        }
        Ok(())
    }

    pub fn weight(&self) -> f64 {
        self.mass * GRAVITY
    }

    /// CoG in FLU body coordinates at tilt `alpha`.
    pub fn cog_body(&self, alpha: f64) -> Result<Vector3<f64>, DynamicsError> {
        let c = cog_estimate(self, alpha)?;
        Ok(Vector3::new(-c.x, c.y, c.z))
    }
}

/// Nose-up pitch rotation: positive `theta` lifts the body x axis towards +z.
pub fn nose_up(theta: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::y_axis(), -theta)
}

/// Nose-up pitch of an attitude expressed in a heading-aligned frame, i.e.
/// the elevation of the body x axis in the frame's x-z plane. Valid past 90°.
pub fn nose_up_pitch(q: &UnitQuaternion<f64>) -> f64 {
    let x_axis = q * Vector3::x();
    x_axis.z.atan2(x_axis.x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidBodyState {
    pub position: Vector3<f64>,
    /// Rotation taking body-frame vectors to the inertial frame.
    pub attitude: UnitQuaternion<f64>,
    pub lin_vel: Vector3<f64>,
    /// Body-frame angular velocity.
    pub ang_vel: Vector3<f64>,
    pub tilt_alpha: f64,
    /// Servo set-point; `tilt_alpha` slews towards it.
    pub tilt_target: f64,
}

impl Default for RigidBodyState {
    fn default() -> Self {
        Self {
            position: Vector3::zeros(),
            attitude: UnitQuaternion::identity(),
            lin_vel: Vector3::zeros(),
            ang_vel: Vector3::zeros(),
            tilt_alpha: 0.0,
            tilt_target: 0.0,
        }
    }
}

impl RigidBodyState {
    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.attitude.coords.iter().all(|v| v.is_finite())
            && self.lin_vel.iter().all(|v| v.is_finite())
            && self.ang_vel.iter().all(|v| v.is_finite())
            && self.tilt_alpha.is_finite()
            && self.tilt_target.is_finite()
    }
}

/// Per-rotor thrusts in N, ordered front-upper, front-lower, rear-left-upper,
/// rear-left-lower, rear-right-upper, rear-right-lower.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotorCommand {
    pub thrusts: Vector6<f64>,
}

impl RotorCommand {
    pub fn new(thrusts: [f64; NUM_ROTORS]) -> Self {
        Self {
            thrusts: Vector6::from(thrusts),
        }
    }

    pub fn zero() -> Self {
        Self {
            thrusts: Vector6::zeros(),
        }
    }

    pub fn clamped(&self, thrust_max: f64) -> Self {
        Self {
            thrusts: self.thrusts.map(|t| t.clamp(0.0, thrust_max)),
        }
    }

    /// Map a normalized action in `[-1, 1]^6` onto `[0, thrust_max]`.
    pub fn from_normalized(action: &[f64], thrust_max: f64) -> Self {
        let mut thrusts = Vector6::zeros();
        for (t, a) in thrusts.iter_mut().zip(action) {
            *t = 0.5 * (a.clamp(-1.0, 1.0) + 1.0) * thrust_max;
        }
        Self { thrusts }
    }

    pub fn to_normalized(&self, thrust_max: f64) -> [f64; NUM_ROTORS] {
        let mut out = [0.0; NUM_ROTORS];
        for (o, t) in out.iter_mut().zip(self.thrusts.iter()) {
            *o = 2.0 * t / thrust_max - 1.0;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WrenchBody {
    pub force: Vector3<f64>,
    pub moment: Vector3<f64>,
}

impl WrenchBody {
    pub fn as_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.force.x,
            self.force.y,
            self.force.z,
            self.moment.x,
            self.moment.y,
            self.moment.z,
        )
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            force: Vector3::new(v[0], v[1], v[2]),
            moment: Vector3::new(v[3], v[4], v[5]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WallModel {
    /// x coordinate of the wall plane in the inertial frame.
    pub wall_x: f64,
    /// Positive pulls towards the wall (suction), negative pushes away.
    pub effect_gain: f64,
    pub decay_length: f64,
    pub ceiling_z: Option<f64>,
}

impl Default for WallModel {
    fn default() -> Self {
        Self {
            wall_x: -0.3,
            effect_gain: 0.05,
            decay_length: 0.15,
            ceiling_z: None,
        }
    }
}

/// Rotor hub positions and thrust axes in the body frame at tilt `alpha`.
pub fn rotor_geometry(
    params: &DroneParams,
    alpha: f64,
) -> ([Vector3<f64>; NUM_ROTORS], [Vector3<f64>; NUM_ROTORS]) {
    let (s, c) = alpha.sin_cos();
    let front = Vector3::new(params.l0 * c, 0.0, -params.l0 * s);
    let rear_left = Vector3::new(-params.l2, params.l1, 0.0);
    let rear_right = Vector3::new(-params.l2, -params.l1, 0.0);
    let front_axis = Vector3::new(s, 0.0, c);
    let up = Vector3::z();
    (
        [front, front, rear_left, rear_left, rear_right, rear_right],
        [front_axis, front_axis, up, up, up, up],
    )
}

/// 6x6 map from rotor thrusts to the thrust wrench about the axle
/// (rows: Fx, Fy, Fz, Mx, My, Mz).
pub fn effectiveness(params: &DroneParams, alpha: f64) -> Matrix6<f64> {
    let (pos, dir) = rotor_geometry(params, alpha);
    let mut m = Matrix6::zeros();
    for i in 0..NUM_ROTORS {
        let moment = pos[i].cross(&dir[i]) + dir[i] * (SPIN[i] * params.rotor_torque_coeff);
        m.fixed_view_mut::<3, 1>(0, i).copy_from(&dir[i]);
        m.fixed_view_mut::<3, 1>(3, i).copy_from(&moment);
    }
    m
}

/// Wrench generated by the rotors alone (no gravity), about the axle.
pub fn thrust_wrench(params: &DroneParams, alpha: f64, cmd: &RotorCommand) -> WrenchBody {
    WrenchBody::from_vector(&(effectiveness(params, alpha) * cmd.thrusts))
}

/// Moment of gravity about the axle, in the body frame.
pub fn gravity_moment(
    params: &DroneParams,
    state: &RigidBodyState,
) -> Result<Vector3<f64>, DynamicsError> {
    let cog = params.cog_body(state.tilt_alpha)?;
    let g_body = state
        .attitude
        .inverse_transform_vector(&Vector3::new(0.0, 0.0, -params.weight()));
    Ok(cog.cross(&g_body))
}

/// Body-frame wrench about the axle: rotor forces and moments plus the
/// gravity moment of the (tilt-dependent) CoG. Gravity force is excluded.
pub fn body_wrench(
    params: &DroneParams,
    state: &RigidBodyState,
    cmd: &RotorCommand,
) -> Result<WrenchBody, DynamicsError> {
    if !cmd.thrusts.iter().all(|t| t.is_finite()) {
        return Err(DynamicsError::NonFinite("rotor command"));
    }
    if !state.is_finite() {
        return Err(DynamicsError::NonFinite("state"));
    }
    let mut w = thrust_wrench(params, state.tilt_alpha, cmd);
    w.moment += gravity_moment(params, state)?;
    Ok(w)
}

/// CoG estimate at tilt `alpha`, in the hardware table convention (x aft of
/// the axle).
///
/// Two-mass model: the tilting front assembly (`tilt_mass_fraction` of the
/// mass, lumped at the front rotor hub) swings about the axle while the rest
/// of the airframe stays fixed, so the CoG moves by the assembly's share of
/// the hub displacement.
pub fn cog_estimate(params: &DroneParams, alpha: f64) -> Result<Vector3<f64>, DynamicsError> {
    if !(-ALPHA_EPS..=ALPHA_MAX + ALPHA_EPS).contains(&alpha) {
        return Err(DynamicsError::TiltOutOfRange(alpha));
    }
    let f = params.tilt_mass_fraction;
    let (s, c) = alpha.sin_cos();
    Ok(params.cog_nominal + Vector3::new(f * params.l0 * (1.0 - c), 0.0, -f * params.l0 * s))
}

/// Disturbance force from the wall (and optional ceiling), inertial frame.
pub fn wall_effect(state: &RigidBodyState, wall: &WallModel, mass: f64) -> Vector3<f64> {
    let scale = wall.effect_gain * mass * GRAVITY;
    let cutoff = 3.0 * wall.decay_length;
    let mut f = Vector3::zeros();
    let dx = wall.wall_x - state.position.x;
    if dx.abs() <= cutoff {
        let toward = if dx > 0.0 { 1.0 } else { -1.0 };
        f.x = toward * scale * (-dx.abs() / wall.decay_length).exp();
    }
    if let Some(ceiling) = wall.ceiling_z {
        let dz = ceiling - state.position.z;
        if dz.abs() <= cutoff {
            let toward = if dz > 0.0 { 1.0 } else { -1.0 };
            f.z = toward * scale * (-dz.abs() / wall.decay_length).exp();
        }
    }
    f
}

/// Advance the state by one semi-implicit Euler step (twist first, then pose
/// from the mean of the old and new twist) under the given rotor command and
/// external disturbance force (inertial frame, N).
pub fn step(
    state: &RigidBodyState,
    cmd: &RotorCommand,
    params: &DroneParams,
    dt: f64,
    disturbance: &Vector3<f64>,
) -> Result<RigidBodyState, DynamicsError> {
    if !cmd.thrusts.iter().all(|t| t.is_finite()) {
        return Err(DynamicsError::NonFinite("rotor command"));
    }
    let wrench = thrust_wrench(params, state.tilt_alpha, cmd);
    integrate(state, params, &wrench, disturbance, dt)
}

/// Integrate the rigid body under a thrust wrench expressed about the axle.
///
/// Translation is integrated for the CoG and mapped back to the axle; rotation
/// uses Euler's equations about the CoG.
pub fn integrate(
    state: &RigidBodyState,
    params: &DroneParams,
    thrust: &WrenchBody,
    disturbance: &Vector3<f64>,
    dt: f64,
) -> Result<RigidBodyState, DynamicsError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(DynamicsError::BadTimeStep(dt));
    }
    if !state.is_finite() || !disturbance.iter().all(|d| d.is_finite()) {
        return Err(DynamicsError::NonFinite("state or disturbance"));
    }
    let cog = params.cog_body(state.tilt_alpha)?;
    let inertia = params.inertia_diag;
    let omega = state.ang_vel;

    let moment_cog = thrust.moment - cog.cross(&thrust.force);
    let gyro = omega.cross(&inertia.component_mul(&omega));
    let omega_dot = (moment_cog - gyro).component_div(&inertia);

    let accel_cog = state.attitude * thrust.force / params.mass
        + Vector3::new(0.0, 0.0, -GRAVITY)
        + disturbance / params.mass;
    let lever = omega_dot.cross(&cog) + omega.cross(&omega.cross(&cog));
    let accel = accel_cog - state.attitude * lever;

    let lin_vel = state.lin_vel + accel * dt;
    let ang_vel = omega + omega_dot * dt;
    // mean of old and new velocity: exact drop under constant acceleration
    let position = state.position + (state.lin_vel + lin_vel) * (0.5 * dt);
    let delta = UnitQuaternion::from_scaled_axis(ang_vel * dt);
    let attitude = UnitQuaternion::new_normalize((state.attitude * delta).into_inner());

    let max_slew = params.servo_rate_max * dt;
    let tilt_alpha = (state.tilt_alpha
        + (state.tilt_target - state.tilt_alpha).clamp(-max_slew, max_slew))
    .clamp(0.0, ALPHA_MAX);

    let next = RigidBodyState {
        position,
        attitude,
        lin_vel,
        ang_vel,
        tilt_alpha,
        tilt_target: state.tilt_target,
    };
    if next.is_finite() {
        Ok(next)
    } else {
        Err(DynamicsError::SimulationFault)
    }
}

/// Total mechanical energy of the body (translational + rotational + potential)
/// with the CoG as reference point.
pub fn mechanical_energy(params: &DroneParams, state: &RigidBodyState) -> Result<f64, DynamicsError> {
    let cog = params.cog_body(state.tilt_alpha)?;
    let omega = state.ang_vel;
    let v_cog = state.lin_vel + state.attitude * omega.cross(&cog);
    let z_cog = state.position.z + (state.attitude * cog).z;
    Ok(0.5 * params.mass * v_cog.norm_squared()
        + 0.5 * omega.dot(&params.inertia_diag.component_mul(&omega))
        + params.weight() * z_cog)
}
