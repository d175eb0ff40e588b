//! Rotation and frame algebra.
//!
//! Quaternions follow the Hamilton convention with the scalar part first,
//! `q_wb` rotates body-frame vectors into the world frame, and perturbations
//! on SO(3) are applied on the right: `R ⊞ δθ = R · Exp(δθ)`.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

/// Magnitude of gravity used everywhere, m/s².
pub const GRAVITY_MAGNITUDE: f64 = 9.79;

/// Tolerance on `‖q‖ − 1` accepted by [`quat_to_rot`].
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// World-frame gravity vector `[0, 0, −9.79]`.
pub fn gravity() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -GRAVITY_MAGNITUDE)
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation vector of a rotation matrix.
pub fn log_so3(r: &Matrix3<f64>) -> Vector3<f64> {
    UnitQuaternion::from_matrix(r).scaled_axis()
}

pub fn exp_so3(phi: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::new(*phi).into_inner()
}

/// Right Jacobian of SO(3): `Exp(φ + δ) ≈ Exp(φ) Exp(Jr(φ) δ)`.
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    if theta2 < 1e-10 {
        return Matrix3::identity() - 0.5 * k + k * k / 6.0;
    }
    let theta = theta2.sqrt();
    Matrix3::identity() - (1.0 - theta.cos()) / theta2 * k + (theta - theta.sin()) / (theta2 * theta) * k * k
}

pub fn right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    if theta2 < 1e-10 {
        return Matrix3::identity() + 0.5 * k + k * k / 12.0;
    }
    let theta = theta2.sqrt();
    let coeff = 1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() + 0.5 * k + coeff * k * k
}

/// Quaternion increment `[1, ½·θ]`, normalized.
///
/// This is the first-order form used by the propagation step; for the small
/// per-sample angles it agrees with the exponential map to O(‖θ‖³).
pub fn quat_increment(theta: &Vector3<f64>) -> UnitQuaternion<f64> {
    let half = 0.5 * theta;
    UnitQuaternion::from_quaternion(Quaternion::new(1.0, half.x, half.y, half.z))
}

/// Rotation vector of [`quat_increment`]: `2·atan(‖θ‖/2)·θ/‖θ‖`.
pub fn increment_angle(theta: &Vector3<f64>) -> Vector3<f64> {
    let r = theta.norm();
    if r < 1e-12 {
        return *theta;
    }
    theta * (2.0 * (0.5 * r).atan() / r)
}

/// Right Jacobian of the increment map: `inc(θ + δ) ≈ inc(θ)·Exp(J δ)`.
pub fn increment_jacobian(theta: &Vector3<f64>) -> Matrix3<f64> {
    let r = theta.norm();
    let phi = increment_angle(theta);
    let dphi = if r < 1e-12 {
        Matrix3::identity()
    } else {
        let u = theta / r;
        let uu = u * u.transpose();
        let g = 2.0 * (0.5 * r).atan();
        (g / r) * (Matrix3::identity() - uu) + uu / (1.0 + 0.25 * r * r)
    };
    right_jacobian(&phi) * dphi
}

/// Advances `q` by the body rate `omega` over `dt`: `q ⊗ [1, ½ω·dt]`.
pub fn quat_integrate(q: &UnitQuaternion<f64>, omega: &Vector3<f64>, dt: f64) -> Result<UnitQuaternion<f64>> {
    if !dt.is_finite() || !omega.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("quat_integrate: non-finite input"));
    }
    if !q.coords.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("quat_integrate: non-finite quaternion"));
    }
    if dt <= 0.0 || dt >= 0.1 {
        return Err(Error::invalid(format!("quat_integrate: dt = {dt} outside (0, 0.1)")));
    }
    let out = q * quat_increment(&(omega * dt));
    Ok(UnitQuaternion::new_normalize(out.into_inner()))
}

/// Rotation matrix of a (checked) unit quaternion.
pub fn quat_to_rot(q: &Quaternion<f64>) -> Result<Matrix3<f64>> {
    let n = q.norm();
    if !n.is_finite() || (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
        return Err(Error::invalid(format!("quaternion norm {n} deviates from 1")));
    }
    Ok(UnitQuaternion::new_unchecked(*q).to_rotation_matrix().into_inner())
}

/// Geodesic angle between two rotations, in `[0, π]`.
pub fn rot_error_angle(ra: &Matrix3<f64>, rb: &Matrix3<f64>) -> f64 {
    let d = ra.transpose() * rb;
    let s = Vector3::new(d[(2, 1)] - d[(1, 2)], d[(0, 2)] - d[(2, 0)], d[(1, 0)] - d[(0, 1)]);
    let sin2 = s.norm(); // 2 sin θ
    let cos2 = d.trace() - 1.0; // 2 cos θ
    sin2.atan2(cos2)
}

/// `q ⊗ Exp(δθ)`, renormalized.
pub fn quat_boxplus(q: &UnitQuaternion<f64>, dtheta: &Vector3<f64>) -> UnitQuaternion<f64> {
    let out = q * UnitQuaternion::from_scaled_axis(*dtheta);
    UnitQuaternion::new_normalize(out.into_inner())
}

/// `Log(q_aᵀ q_b)`, the right-tangent difference `q_b ⊟ q_a`.
pub fn quat_boxminus(qb: &UnitQuaternion<f64>, qa: &UnitQuaternion<f64>) -> Vector3<f64> {
    (qa.inverse() * qb).scaled_axis()
}
