use nalgebra::{Vector2, Vector3};

use crate::factors::{FeatureState, NavState};

/// Rays closer to parallel than this are not triangulated.
pub const MIN_PARALLAX_DEG: f64 = 0.2;
/// Depth used when no triangulated feature is available, m.
pub const DEFAULT_DEPTH: f64 = 5.0;
pub(crate) const MIN_DEPTH: f64 = 0.05;
pub(crate) const MAX_DEPTH: f64 = 1e3;

/// A landmark tracked in the window, parameterized by inverse depth along
/// its ray in the anchor keyframe.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    /// Sequence number of the anchor keyframe.
    pub anchor: u64,
    pub u_anchor: Vector2<f64>,
    /// Measurement std-dev in normalized image units.
    pub sigma: f64,
    pub state: Option<FeatureState>,
    /// Observations in later keyframes, by sequence number.
    pub obs: Vec<(u64, Vector2<f64>)>,
}

impl Feature {
    pub fn new(anchor: u64, u_anchor: Vector2<f64>, sigma: f64) -> Self {
        Self {
            anchor,
            u_anchor,
            sigma,
            state: None,
            obs: Vec::new(),
        }
    }
}

/// Mid-point of the closest approach of two bearing rays. Returns the depth
/// along the first camera's optical axis and the angle between the rays.
pub fn triangulate_midpoint(a: &NavState, ua: &Vector2<f64>, b: &NavState, ub: &Vector2<f64>) -> Option<(f64, f64)> {
    let da = a.q * Vector3::new(ua.x, ua.y, 1.0);
    let db = b.q * Vector3::new(ub.x, ub.y, 1.0);
    let parallax = da.angle(&db);
    let w0 = a.p - b.p;
    let (aa, bb, cc) = (da.dot(&da), da.dot(&db), db.dot(&db));
    let (d, e) = (da.dot(&w0), db.dot(&w0));
    let denom = aa * cc - bb * bb;
    if denom <= 1e-12 * aa * cc {
        return None;
    }
    let s = (bb * e - cc * d) / denom;
    let t = (aa * e - bb * d) / denom;
    let mid = 0.5 * ((a.p + da * s) + (b.p + db * t));
    let depth = (a.q.inverse() * (mid - a.p)).z;
    depth.is_finite().then_some((depth, parallax))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;

    fn bearing(x: &NavState, pw: &Vector3<f64>) -> Vector2<f64> {
        let pc = x.q.inverse() * (pw - x.p);
        Vector2::new(pc.x / pc.z, pc.y / pc.z)
    }

    #[test]
    fn recovers_depth_of_synthetic_point() {
        let a = NavState {
            p: Vector3::new(0.0, 0.0, 1.0),
            q: UnitQuaternion::from_euler_angles(0.1, -0.05, 0.4),
            ..NavState::identity(0.0)
        };
        let b = NavState {
            p: Vector3::new(0.5, 0.2, 1.1),
            q: UnitQuaternion::from_euler_angles(0.0, 0.05, 0.6),
            ..NavState::identity(0.1)
        };
        let pw = Vector3::new(1.0, -0.5, 7.0);
        let true_depth = (a.q.inverse() * (pw - a.p)).z;
        let (d, parallax) = triangulate_midpoint(&a, &bearing(&a, &pw), &b, &bearing(&b, &pw)).unwrap();
        assert!(d > 0.0);
        assert!((d - true_depth).abs() < 1e-9, "{d} vs {true_depth}");
        assert!(parallax > 0.0);
    }

    #[test]
    fn parallel_rays_are_rejected() {
        let a = NavState::identity(0.0);
        let b = NavState {
            p: Vector3::new(1.0, 0.0, 0.0),
            ..NavState::identity(0.1)
        };
        assert!(triangulate_midpoint(&a, &Vector2::zeros(), &b, &Vector2::zeros()).is_none());
    }
}
