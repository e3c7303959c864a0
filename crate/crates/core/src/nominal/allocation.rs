//! Thrust allocation: map a (force-magnitude, moment) demand onto the six
//! rotors at the current tilt with non-negative, bounded thrusts.

use nalgebra::{SMatrix, SVector, Vector3, Vector4, Vector6};

use super::ControlError;
use crate::dynamics::{effectiveness, DroneParams, RotorCommand, NUM_ROTORS};

type Alloc = SMatrix<f64, 4, NUM_ROTORS>;

const ROUNDTRIP_TOL: f64 = 1e-6;
const MAX_REDISTRIBUTIONS: usize = NUM_ROTORS;

/// Rows: force along the demanded x-z direction, then Mx, My, Mz of the
/// rotor thrusts about the body point `reference`.
fn allocation_matrix(
    params: &DroneParams,
    alpha: f64,
    force_x: f64,
    force_z: f64,
    reference: &Vector3<f64>,
) -> (Alloc, f64) {
    let mut b = effectiveness(params, alpha);
    for j in 0..NUM_ROTORS {
        let f = Vector3::new(b[(0, j)], b[(1, j)], b[(2, j)]);
        let shift = reference.cross(&f);
        for r in 0..3 {
            b[(3 + r, j)] -= shift[r];
        }
    }
    let norm = force_x.hypot(force_z);
    let (nx, nz) = if norm > 1e-12 {
        (force_x / norm, force_z / norm)
    } else {
        (0.0, 1.0)
    };
    let mut a = Alloc::zeros();
    for j in 0..NUM_ROTORS {
        a[(0, j)] = nx * b[(0, j)] + nz * b[(2, j)];
        a[(1, j)] = b[(3, j)];
        a[(2, j)] = b[(4, j)];
        a[(3, j)] = b[(5, j)];
    }
    (a, norm)
}

/// Minimum-norm solution of `a_free * x = rhs` over the columns in `free`.
fn min_norm(a: &Alloc, free: &[bool; NUM_ROTORS], rhs: &Vector4<f64>) -> Vector6<f64> {
    let mut af = *a;
    for (j, &f) in free.iter().enumerate() {
        if !f {
            af.column_mut(j).fill(0.0);
        }
    }
    let gram = af * af.transpose();
    match gram.cholesky() {
        Some(ch) => af.transpose() * ch.solve(rhs),
        None => {
            let svd = af.svd(true, true);
            match svd.pseudo_inverse(1e-12) {
                Ok(pinv) => pinv * rhs,
                Err(_) => SVector::zeros(),
            }
        }
    }
}

fn clamp_redistribute(a: &Alloc, rhs: &Vector4<f64>, t_max: f64) -> Vector6<f64> {
    let mut fixed = Vector6::<f64>::zeros();
    let mut free = [true; NUM_ROTORS];
    let mut x = min_norm(a, &free, rhs);
    for _ in 0..MAX_REDISTRIBUTIONS {
        let mut changed = false;
        for j in 0..NUM_ROTORS {
            if !free[j] {
                continue;
            }
            if x[j] < 0.0 {
                free[j] = false;
                fixed[j] = 0.0;
                changed = true;
            } else if x[j] > t_max {
                free[j] = false;
                fixed[j] = t_max;
                changed = true;
            }
        }
        if !changed || !free.iter().any(|&f| f) {
            break;
        }
        let rem = rhs - a * fixed;
        let y = min_norm(a, &free, &rem);
        for j in 0..NUM_ROTORS {
            x[j] = if free[j] { y[j] } else { fixed[j] };
        }
    }
    x.map(|t| t.clamp(0.0, t_max))
}

/// Exact bounded minimum-norm solve by enumerating which rotors sit at a
/// bound. Only used when clamp-and-redistribute misses a feasible demand.
fn exhaustive(a: &Alloc, rhs: &Vector4<f64>, t_max: f64) -> Option<Vector6<f64>> {
    let mut best: Option<(f64, Vector6<f64>)> = None;
    // each rotor: 0 = free, 1 = at zero, 2 = at t_max
    for code in 0..3usize.pow(NUM_ROTORS as u32) {
        let mut c = code;
        let mut free = [true; NUM_ROTORS];
        let mut fixed = Vector6::zeros();
        for j in 0..NUM_ROTORS {
            match c % 3 {
                1 => free[j] = false,
                2 => {
                    free[j] = false;
                    fixed[j] = t_max;
                }
                _ => {}
            }
            c /= 3;
        }
        let rem = rhs - a * fixed;
        let y = min_norm(a, &free, &rem);
        let mut x = fixed;
        for j in 0..NUM_ROTORS {
            if free[j] {
                x[j] = y[j];
            }
        }
        let in_box = x.iter().all(|&t| t >= -1e-12 && t <= t_max + 1e-12);
        if !in_box || (a * x - rhs).amax() > ROUNDTRIP_TOL {
            continue;
        }
        let cost = x.norm_squared();
        if best.as_ref().is_none_or(|(b, _)| cost < *b) {
            best = Some((cost, x.map(|t| t.clamp(0.0, t_max))));
        }
    }
    best.map(|(_, x)| x)
}

/// Allocate a thrust-force demand (body x/z components, N) and a moment
/// demand about the axle (N·m) to the rotors.
///
/// The force row constrains the component along the demanded x-z direction;
/// the split between x and z then follows from the moment balance.
pub fn allocate(
    force_body_z: f64,
    force_body_x: f64,
    moments: &Vector3<f64>,
    alpha: f64,
    params: &DroneParams,
) -> Result<RotorCommand, ControlError> {
    let inputs = [force_body_z, force_body_x, moments.x, moments.y, moments.z, alpha];
    if !inputs.iter().all(|v| v.is_finite()) {
        return Err(ControlError::NonFinite);
    }
    let (a, norm) = allocation_matrix(params, alpha, force_body_x, force_body_z, &Vector3::zeros());
    let rhs = Vector4::new(norm, moments.x, moments.y, moments.z);
    let x = clamp_redistribute(&a, &rhs, params.thrust_max);
    let residual = (a * x - rhs).amax();
    if residual <= ROUNDTRIP_TOL {
        return Ok(RotorCommand { thrusts: x });
    }
    match exhaustive(&a, &rhs, params.thrust_max) {
        Some(x) => Ok(RotorCommand { thrusts: x }),
        None => Err(ControlError::UnallocatableWrench { residual }),
    }
}

/// Like [`allocate`] but never fails (an unreachable demand yields the
/// clamp-and-redistribute best effort), with the moment demand taken about
/// the body point `reference`.
pub fn allocate_saturating(
    force_body_z: f64,
    force_body_x: f64,
    moments: &Vector3<f64>,
    reference: &Vector3<f64>,
    alpha: f64,
    params: &DroneParams,
) -> RotorCommand {
    let (a, norm) = allocation_matrix(params, alpha, force_body_x, force_body_z, reference);
    let rhs = Vector4::new(norm, moments.x, moments.y, moments.z);
    let x = clamp_redistribute(&a, &rhs, params.thrust_max);
    if x.iter().all(|t| t.is_finite()) {
        RotorCommand { thrusts: x }
    } else {
        RotorCommand::zero()
    }
}
