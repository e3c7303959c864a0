//! Static thrust/moment balance of the tilting drone and its solver.
//!
//! Unknowns are the front thrust sum `f1`, the rear thrust sum `f2` and the
//! body pitch `theta_des` (nose-up positive). With `W = m g` and the CoG
//! `(x, z)` in the table convention (x aft of the axle):
//!
//! ```text
//! f1 sin α              = W sin θ_des
//! f1 cos α + f2         = W cos θ_des
//! -f1 l0 + f2 l2 - W (z sin θ + x cos θ) = 0
//! ```
//!
//! `θ` in the moment row is either the current pitch (held fixed) or
//! `θ_des` itself, which yields the self-consistent hover pitch.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::ControlError;
use crate::dynamics::{cog_estimate, DroneParams};

const MAX_NEWTON_ITERS: usize = 50;
const RESIDUAL_TOL: f64 = 1e-11;
const SCAN_POINTS: usize = 4000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EquationForm {
    /// `f2 cos α + f2` and `z sin θ - x sin θ`, exactly as typeset.
    AsPrinted,
    #[default]
    Corrected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuasiDecouplingSolution {
    pub theta_des: f64,
    pub f1: f64,
    pub f2: f64,
    pub residual: f64,
    pub iterations: usize,
    /// Whether the bracketing scan had to take over from Newton.
    pub used_fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum MomentPitch {
    Fixed(f64),
    Consistent,
}

/// The three balance equations at a fixed tilt.
#[derive(Debug, Clone, Copy)]
struct Balance {
    form: EquationForm,
    sa: f64,
    ca: f64,
    weight: f64,
    l0: f64,
    l2: f64,
    x: f64,
    z: f64,
    pitch: MomentPitch,
    f1_max: f64,
    f2_max: f64,
}

impl Balance {
    fn new(
        form: EquationForm,
        alpha: f64,
        params: &DroneParams,
        pitch: MomentPitch,
    ) -> Result<Self, ControlError> {
        let cog = cog_estimate(params, alpha)?;
        Ok(Self {
            form,
            sa: alpha.sin(),
            ca: alpha.cos(),
            weight: params.weight(),
            l0: params.l0,
            l2: params.l2,
            x: cog.x,
            z: cog.z,
            pitch,
            f1_max: 2.0 * params.thrust_max,
            f2_max: 4.0 * params.thrust_max,
        })
    }

    fn gravity_moment(&self, theta: f64) -> f64 {
        let (s, c) = theta.sin_cos();
        match self.form {
            EquationForm::Corrected => self.weight * (self.z * s + self.x * c),
            EquationForm::AsPrinted => self.weight * (self.z * s - self.x * s),
        }
    }

    fn gravity_moment_slope(&self, theta: f64) -> f64 {
        let (s, c) = theta.sin_cos();
        match self.form {
            EquationForm::Corrected => self.weight * (self.z * c - self.x * s),
            EquationForm::AsPrinted => self.weight * (self.z * c - self.x * c),
        }
    }

    fn moment_pitch(&self, theta_des: f64) -> f64 {
        match self.pitch {
            MomentPitch::Fixed(t) => t,
            MomentPitch::Consistent => theta_des,
        }
    }

    fn residuals(&self, v: &Vector3<f64>) -> Vector3<f64> {
        let (f1, f2, th) = (v[0], v[1], v[2]);
        let (s, c) = th.sin_cos();
        let lift = match self.form {
            EquationForm::Corrected => f1 * self.ca + f2,
            EquationForm::AsPrinted => f2 * self.ca + f2,
        };
        Vector3::new(
            f1 * self.sa - self.weight * s,
            lift - self.weight * c,
            -f1 * self.l0 + f2 * self.l2 - self.gravity_moment(self.moment_pitch(th)),
        )
    }

    fn jacobian(&self, v: &Vector3<f64>) -> Matrix3<f64> {
        let th = v[2];
        let (s, c) = th.sin_cos();
        let (d1, d2) = match self.form {
            EquationForm::Corrected => (self.ca, 1.0),
            EquationForm::AsPrinted => (0.0, self.ca + 1.0),
        };
        let d_moment = match self.pitch {
            MomentPitch::Fixed(_) => 0.0,
            MomentPitch::Consistent => -self.gravity_moment_slope(th),
        };
        Matrix3::new(
            self.sa, 0.0, -self.weight * c,
            d1, d2, self.weight * s,
            -self.l0, self.l2, d_moment,
        )
    }

    /// Thrust sums that satisfy the lift and moment rows at pitch `th`.
    fn thrusts_at(&self, th: f64) -> Option<(f64, f64)> {
        let (d1, d2) = match self.form {
            EquationForm::Corrected => (self.ca, 1.0),
            EquationForm::AsPrinted => (0.0, self.ca + 1.0),
        };
        let rhs_lift = self.weight * th.cos();
        let rhs_moment = self.gravity_moment(self.moment_pitch(th));
        let det = d1 * self.l2 + d2 * self.l0;
        if det.abs() < 1e-14 {
            return None;
        }
        let f1 = (rhs_lift * self.l2 - d2 * rhs_moment) / det;
        let f2 = (d1 * rhs_moment + self.l0 * rhs_lift) / det;
        Some((f1, f2))
    }

    /// Reduced scalar residual: the horizontal-force row after eliminating
    /// the thrusts through the other two rows.
    fn reduced(&self, th: f64) -> f64 {
        match self.thrusts_at(th) {
            Some((f1, _)) => f1 * self.sa - self.weight * th.sin(),
            None => f64::NAN,
        }
    }

    fn feasible(&self, f1: f64, f2: f64) -> bool {
        let tol = 1e-9;
        f1 >= -tol && f2 >= -tol && f1 <= self.f1_max + tol && f2 <= self.f2_max + tol
    }

    fn newton(&self, mut v: Vector3<f64>) -> Option<(Vector3<f64>, usize)> {
        for it in 0..MAX_NEWTON_ITERS {
            let r = self.residuals(&v);
            if r.amax() < RESIDUAL_TOL {
                return Some((v, it));
            }
            let step = self.jacobian(&v).lu().solve(&r)?;
            v -= step;
            if !v.iter().all(|x| x.is_finite()) {
                return None;
            }
        }
        let r = self.residuals(&v);
        (r.amax() < RESIDUAL_TOL).then_some((v, MAX_NEWTON_ITERS))
    }
}

fn pitch_range(pitch: MomentPitch) -> (f64, f64) {
    use std::f64::consts::{FRAC_PI_2, PI};
    match pitch {
        MomentPitch::Fixed(_) => (-FRAC_PI_2, FRAC_PI_2),
        MomentPitch::Consistent => (-PI, PI),
    }
}

fn solve(
    balance: &Balance,
    alpha: f64,
    guess_theta: f64,
) -> Result<QuasiDecouplingSolution, ControlError> {
    let (lo, hi) = pitch_range(balance.pitch);
    let accept = |v: &Vector3<f64>| {
        v[2] > lo && v[2] < hi && balance.feasible(v[0], v[1])
    };
    let initial = |th: f64| {
        let (f1, f2) = balance.thrusts_at(th).unwrap_or((0.0, 0.0));
        Vector3::new(f1, f2, th)
    };

    if let Some((v, iterations)) = balance.newton(initial(guess_theta)) {
        if accept(&v) {
            return Ok(finish(balance, v, iterations, false));
        }
    }

    // Bracketing scan over the admissible pitch range, bisect every sign
    // change and keep the feasible root closest to the guess.
    let width = hi - lo;
    let mut best: Option<Vector3<f64>> = None;
    let mut prev_th = lo + 1e-9;
    let mut prev_g = balance.reduced(prev_th);
    let mut any_root = false;
    for k in 1..=SCAN_POINTS {
        let th = lo + width * k as f64 / SCAN_POINTS as f64 - if k == SCAN_POINTS { 1e-9 } else { 0.0 };
        let g = balance.reduced(th);
        if prev_g.is_finite() && g.is_finite() && (prev_g == 0.0 || prev_g.signum() != g.signum()) {
            let root = bisect(|t| balance.reduced(t), prev_th, th);
            any_root = true;
            if let Some((f1, f2)) = balance.thrusts_at(root) {
                let cand = Vector3::new(f1, f2, root);
                let polished = balance.newton(cand).map(|(v, _)| v).unwrap_or(cand);
                if accept(&polished)
                    && best.is_none_or(|b| (b[2] - guess_theta).abs() > (polished[2] - guess_theta).abs())
                {
                    best = Some(polished);
                }
            }
        }
        prev_th = th;
        prev_g = g;
    }
    match best {
        Some(v) => Ok(finish(balance, v, MAX_NEWTON_ITERS, true)),
        None if any_root => {
            let th = guess_theta.clamp(lo, hi);
            let (f1, f2) = balance.thrusts_at(th).unwrap_or((f64::NAN, f64::NAN));
            Err(ControlError::InfeasibleEquilibrium { alpha, f1, f2 })
        }
        None => Err(ControlError::NonConvergence { alpha }),
    }
}

fn finish(
    balance: &Balance,
    v: Vector3<f64>,
    iterations: usize,
    used_fallback: bool,
) -> QuasiDecouplingSolution {
    QuasiDecouplingSolution {
        theta_des: v[2],
        f1: v[0],
        f2: v[1],
        residual: balance.residuals(&v).amax(),
        iterations,
        used_fallback,
    }
}

fn bisect(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let mut fa = f(a);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        let fm = f(m);
        if fm == 0.0 || (b - a) < 1e-15 {
            return m;
        }
        if fa.signum() == fm.signum() {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

/// Solve the balance for `theta_des` with the moment row evaluated at the
/// current pitch `theta_current`. The result lies in (-π/2, π/2).
pub fn solve_theta_des(
    alpha: f64,
    params: &DroneParams,
    theta_current: f64,
    form: EquationForm,
) -> Result<QuasiDecouplingSolution, ControlError> {
    let balance = Balance::new(form, alpha, params, MomentPitch::Fixed(theta_current))?;
    solve(&balance, alpha, 0.75 * alpha)
}

/// Self-consistent hover pitch: the moment row uses `theta_des` itself, so
/// the returned pitch is a true static equilibrium of the simulated body.
/// May exceed 90° at large tilt.
pub fn hover_pitch(
    alpha: f64,
    params: &DroneParams,
    form: EquationForm,
) -> Result<QuasiDecouplingSolution, ControlError> {
    let guess = match solve_theta_des(alpha, params, 0.0, form) {
        Ok(s) => s.theta_des,
        Err(_) => 0.8 * alpha,
    };
    let balance = Balance::new(form, alpha, params, MomentPitch::Consistent)?;
    solve(&balance, alpha, guess)
}
