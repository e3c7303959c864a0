//! Runtime Lyapunov monitoring on logged trajectories: `V = 1 + ‖k‖`, its
//! directional derivative, and the bound for a perturbed system.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Inside this ball around the goal the derivative is defined as zero.
pub const SINGULAR_EPS: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum StabilityError {
    #[error("no samples after the transient cutoff {cutoff} s")]
    EmptyWindow { cutoff: f64 },
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

pub fn lyapunov_position(p: &Vector3<f64>) -> f64 {
    1.0 + p.norm()
}

/// `(x ẋ + y ẏ + z ż) / ‖p‖`, or 0 within [`SINGULAR_EPS`] of the origin.
pub fn lyapunov_rate(p: &Vector3<f64>, v: &Vector3<f64>) -> f64 {
    let n = p.norm();
    if n <= SINGULAR_EPS {
        0.0
    } else {
        p.dot(v) / n
    }
}

/// `|x + y + z| / ‖p‖`, the factor multiplying the perturbation norm.
pub fn perturbation_gain(p: &Vector3<f64>) -> f64 {
    let n = p.norm();
    if n <= SINGULAR_EPS {
        0.0
    } else {
        (p.x + p.y + p.z).abs() / n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovSample {
    pub t: f64,
    pub v: f64,
    pub vdot: f64,
    pub p_norm: f64,
    /// `|x+y+z|/‖p‖`
    pub gain: f64,
}

impl LyapunovSample {
    pub fn new(t: f64, p: &Vector3<f64>, v: &Vector3<f64>) -> Self {
        Self {
            t,
            v: lyapunov_position(p),
            vdot: lyapunov_rate(p, v),
            p_norm: p.norm(),
            gain: perturbation_gain(p),
        }
    }
}

/// Samples from aligned time, position-error and velocity-error series.
pub fn samples(ts: &[f64], ps: &[Vector3<f64>], vs: &[Vector3<f64>]) -> Result<Vec<LyapunovSample>, StabilityError> {
    if ts.len() != ps.len() || ps.len() != vs.len() {
        return Err(StabilityError::LengthMismatch(ts.len(), ps.len().min(vs.len())));
    }
    Ok(ts.iter().zip(ps).zip(vs).map(|((t, p), v)| LyapunovSample::new(*t, p, v)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// Share of post-cutoff samples with `vdot < tolerance` (in-ball
    /// samples count as converged).
    pub fraction_negative: f64,
    pub transient_cutoff: f64,
    pub worst_vdot: f64,
    /// Worst `V + gain·‖g‖ − vdot` over the window (bound as printed).
    pub perturbed_bound_margin: f64,
    /// Worst `gain·‖g‖ − vdot`, the same bound with `V̇ ≤ 0` in place of `V`.
    pub rate_variant_margin: f64,
    pub disturbance_bound: f64,
    pub samples: usize,
}

pub fn monitor(
    trajectory: &[LyapunovSample],
    transient_cutoff: f64,
    disturbance_bound: f64,
    tolerance: f64,
) -> Result<StabilityReport, StabilityError> {
    let window: Vec<&LyapunovSample> = trajectory.iter().filter(|s| s.t >= transient_cutoff).collect();
    if window.is_empty() {
        return Err(StabilityError::EmptyWindow { cutoff: transient_cutoff });
    }
    let negative = window
        .iter()
        .filter(|s| s.vdot < tolerance || s.p_norm <= SINGULAR_EPS)
        .count();
    let mut worst_vdot = f64::NEG_INFINITY;
    let mut margin = f64::INFINITY;
    let mut variant = f64::INFINITY;
    for s in &window {
        worst_vdot = worst_vdot.max(s.vdot);
        margin = margin.min(s.v + s.gain * disturbance_bound - s.vdot);
        variant = variant.min(s.gain * disturbance_bound - s.vdot);
    }
    Ok(StabilityReport {
        fraction_negative: negative as f64 / window.len() as f64,
        transient_cutoff,
        worst_vdot,
        perturbed_bound_margin: margin,
        rate_variant_margin: variant,
        disturbance_bound,
        samples: window.len(),
    })
}
