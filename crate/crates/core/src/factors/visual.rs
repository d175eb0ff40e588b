use nalgebra::{Matrix2x3, SMatrix, Vector2, Vector3};

use crate::geometry::skew;

use super::{NavState, SP, SQ, STATE_DIM};

/// Points closer than this along the optical axis are treated as behind the camera.
pub const MIN_PROJECTION_DEPTH: f64 = 1e-3;

/// Inverse depth of a landmark along its first-observation ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureState {
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisualEval {
    /// Reprojection error in normalized image coordinates.
    pub r: Vector2<f64>,
    pub j_anchor: SMatrix<f64, 2, STATE_DIM>,
    pub j_obs: SMatrix<f64, 2, STATE_DIM>,
    pub j_lambda: Vector2<f64>,
}

/// Reprojects the anchored inverse-depth point into the observer frame.
///
/// The camera frame is the body frame, looking along body +z. Returns `None`
/// when the point lands behind the observer or `lambda` is not positive.
pub fn visual_residual(
    anchor: &NavState,
    observer: &NavState,
    lambda: f64,
    u_anchor: &Vector2<f64>,
    u_obs: &Vector2<f64>,
) -> Option<VisualEval> {
    if !(lambda > 0.0) {
        return None;
    }
    let uh = Vector3::new(u_anchor.x, u_anchor.y, 1.0);
    let p_ci = uh / lambda;
    let ri = anchor.q.to_rotation_matrix().into_inner();
    let rj = observer.q.to_rotation_matrix().into_inner();
    let p_w = ri * p_ci + anchor.p;
    let p_cj = rj.transpose() * (p_w - observer.p);
    if p_cj.z < MIN_PROJECTION_DEPTH {
        return None;
    }
    let z = p_cj.z;
    let r = Vector2::new(p_cj.x / z, p_cj.y / z) - u_obs;
    let dpi = Matrix2x3::new(1.0 / z, 0.0, -p_cj.x / (z * z), 0.0, 1.0 / z, -p_cj.y / (z * z));
    let rjt_ri = rj.transpose() * ri;

    let mut j_anchor = SMatrix::<f64, 2, STATE_DIM>::zeros();
    j_anchor
        .fixed_view_mut::<2, 3>(0, SP)
        .copy_from(&(dpi * rj.transpose()));
    j_anchor
        .fixed_view_mut::<2, 3>(0, SQ)
        .copy_from(&(dpi * rjt_ri * (-skew(&p_ci))));
    let mut j_obs = SMatrix::<f64, 2, STATE_DIM>::zeros();
    j_obs
        .fixed_view_mut::<2, 3>(0, SP)
        .copy_from(&(dpi * (-rj.transpose())));
    j_obs.fixed_view_mut::<2, 3>(0, SQ).copy_from(&(dpi * skew(&p_cj)));
    let j_lambda = dpi * (rjt_ri * (-uh / (lambda * lambda)));
    Some(VisualEval {
        r,
        j_anchor,
        j_obs,
        j_lambda,
    })
}

/// Huber loss on a squared whitened norm `s`: returns `(ρ(s), ρ'(s))`.
pub fn huber(s: f64, delta: f64) -> (f64, f64) {
    let d2 = delta * delta;
    if s <= d2 {
        (s, 1.0)
    } else {
        let root = s.sqrt();
        (2.0 * delta * root - d2, delta / root)
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;
    use nalgebra::UnitQuaternion;
    use proptest::prelude::*;

    fn project(x: &NavState, pw: &Vector3<f64>) -> (Vector2<f64>, f64) {
        let pc = x.q.inverse() * (pw - x.p);
        (Vector2::new(pc.x / pc.z, pc.y / pc.z), pc.z)
    }

    #[test]
    fn self_projection_is_zero() {
        let x = NavState {
            p: Vector3::new(1.0, 2.0, 0.5),
            q: UnitQuaternion::from_euler_angles(0.1, -0.2, 0.7),
            ..NavState::identity(0.0)
        };
        let u = Vector2::new(0.2, -0.1);
        let e = visual_residual(&x, &x, 0.3, &u, &u).unwrap();
        assert!(e.r.norm() < 1e-15);
    }

    #[test]
    fn true_geometry_has_zero_residual() {
        let a = NavState {
            p: Vector3::new(0.0, 0.0, 1.0),
            q: UnitQuaternion::from_euler_angles(0.05, 0.1, 0.3),
            ..NavState::identity(0.0)
        };
        let b = NavState {
            p: Vector3::new(0.4, -0.2, 1.1),
            q: UnitQuaternion::from_euler_angles(-0.1, 0.05, 0.5),
            ..NavState::identity(0.1)
        };
        let pw = Vector3::new(0.7, 0.3, 6.0);
        let (ua, za) = project(&a, &pw);
        let (ub, _) = project(&b, &pw);
        let e = visual_residual(&a, &b, 1.0 / za, &ua, &ub).unwrap();
        assert!(e.r.norm() < 1e-9);
    }

    #[test]
    fn point_behind_camera_is_skipped() {
        let a = NavState::identity(0.0);
        let b = NavState {
            p: Vector3::new(0.0, 0.0, 10.0),
            ..NavState::identity(0.1)
        };
        assert!(visual_residual(&a, &b, 0.2, &Vector2::zeros(), &Vector2::zeros()).is_none());
        assert!(visual_residual(&a, &a, -1.0, &Vector2::zeros(), &Vector2::zeros()).is_none());
    }

    #[test]
    fn huber_is_continuous_at_threshold() {
        let (r0, d0) = huber(1.0, 1.0);
        let (r1, d1) = huber(1.0 + 1e-12, 1.0);
        assert!((r0 - r1).abs() < 1e-10 && (d0 - d1).abs() < 1e-6);
        assert_eq!(huber(0.25, 1.0), (0.25, 1.0));
        assert_eq!(huber(4.0, 1.0), (3.0, 0.5));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn jacobians_match_finite_differences(
            a in nav_state(), rel in v3(0.3), off in v3(0.5),
            ua in (-0.6..0.6f64, -0.6..0.6f64), depth in 2.0..10.0f64,
            noise in (-0.05..0.05f64, -0.05..0.05f64),
        ) {
            let b = NavState {
                p: a.p + a.q * off,
                q: a.q * UnitQuaternion::from_scaled_axis(rel),
                ..a
            };
            let ua = Vector2::new(ua.0, ua.1);
            let lambda = 1.0 / depth;
            let pw = a.q * (Vector3::new(ua.x, ua.y, 1.0) * depth) + a.p;
            let (ub, zb) = project(&b, &pw);
            prop_assume!(zb > 0.5);
            let ub = ub + Vector2::new(noise.0, noise.1);
            let e = visual_residual(&a, &b, lambda, &ua, &ub).unwrap();
            let na = numeric_jacobian(&a, |x| visual_residual(x, &b, lambda, &ua, &ub).unwrap().r);
            let nb = numeric_jacobian(&b, |x| visual_residual(&a, x, lambda, &ua, &ub).unwrap().r);
            prop_assert!(close(&e.j_anchor, &na), "anchor\n{}\n{}", e.j_anchor, na);
            prop_assert!(close(&e.j_obs, &nb), "observer\n{}\n{}", e.j_obs, nb);
            let h = 1e-7;
            let nl = (visual_residual(&a, &b, lambda + h, &ua, &ub).unwrap().r
                - visual_residual(&a, &b, lambda - h, &ua, &ub).unwrap().r) / (2.0 * h);
            prop_assert!((e.j_lambda - nl).norm() <= 1e-4 * nl.norm() + 1e-7);
        }
    }
}
