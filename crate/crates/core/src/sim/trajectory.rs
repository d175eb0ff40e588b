use std::str::FromStr;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{gravity, log_so3};

use super::force::ForceProfile;
use super::GroundTruthSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryKind {
    Hover,
    Circle,
    Lemniscate,
    Polyline,
}

impl FromStr for TrajectoryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hover" => Ok(Self::Hover),
            "circle" => Ok(Self::Circle),
            "lemniscate" => Ok(Self::Lemniscate),
            "polyline" => Ok(Self::Polyline),
            other => Err(Error::invalid(format!("unknown trajectory kind '{other}'"))),
        }
    }
}

/// Analytic position trajectory. Every variant is C² so velocity and
/// acceleration are exact derivatives of position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectorySpec {
    Hover {
        position: Vector3<f64>,
    },
    Circle {
        center: Vector3<f64>,
        radius: f64,
        period: f64,
        /// Optional vertical oscillation at twice the orbit rate.
        #[serde(default)]
        vertical_amplitude: f64,
    },
    /// Figure-eight (lemniscate of Gerono): `x = a sin ωt`, `y = a/2 sin 2ωt`.
    Lemniscate {
        center: Vector3<f64>,
        size: f64,
        period: f64,
        #[serde(default)]
        vertical_amplitude: f64,
    },
    /// Rest-to-rest quintic segments of equal duration through the waypoints.
    Polyline {
        waypoints: Vec<Vector3<f64>>,
        segment_duration: f64,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct Kinematics {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub a: Vector3<f64>,
}

impl TrajectorySpec {
    pub fn kind(&self) -> TrajectoryKind {
        match self {
            Self::Hover { .. } => TrajectoryKind::Hover,
            Self::Circle { .. } => TrajectoryKind::Circle,
            Self::Lemniscate { .. } => TrajectoryKind::Lemniscate,
            Self::Polyline { .. } => TrajectoryKind::Polyline,
        }
    }

    /// Default parameters for a kind, used by the CLI when only the kind is given.
    pub fn default_for(kind: TrajectoryKind, duration: f64) -> Self {
        match kind {
            TrajectoryKind::Hover => Self::Hover {
                position: Vector3::new(0.0, 0.0, 1.0),
            },
            TrajectoryKind::Circle => Self::Circle {
                center: Vector3::new(0.0, 0.0, 1.5),
                radius: 2.0,
                period: 10.0,
                vertical_amplitude: 0.0,
            },
            TrajectoryKind::Lemniscate => Self::Lemniscate {
                center: Vector3::new(0.0, 0.0, 1.5),
                size: 2.0,
                period: 12.0,
                vertical_amplitude: 0.0,
            },
            TrajectoryKind::Polyline => {
                let waypoints = vec![
                    Vector3::new(0.0, 0.0, 1.0),
                    Vector3::new(2.0, 0.0, 1.5),
                    Vector3::new(2.0, 2.0, 1.0),
                    Vector3::new(0.0, 0.0, 1.0),
                ];
                let segment_duration = duration / (waypoints.len() - 1) as f64;
                Self::Polyline {
                    waypoints,
                    segment_duration,
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |v: &Vector3<f64>| v.iter().all(|x| x.is_finite());
        let ok = match self {
            Self::Hover { position } => finite(position),
            Self::Circle {
                center,
                radius,
                period,
                vertical_amplitude,
            } => finite(center) && *radius >= 0.0 && *period > 0.0 && vertical_amplitude.is_finite(),
            Self::Lemniscate {
                center,
                size,
                period,
                vertical_amplitude,
            } => finite(center) && *size >= 0.0 && *period > 0.0 && vertical_amplitude.is_finite(),
            Self::Polyline {
                waypoints,
                segment_duration,
            } => !waypoints.is_empty() && waypoints.iter().all(finite) && *segment_duration > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad trajectory parameters: {self:?}")))
        }
    }

    pub fn kinematics(&self, t: f64) -> Kinematics {
        match self {
            Self::Hover { position } => Kinematics {
                p: *position,
                v: Vector3::zeros(),
                a: Vector3::zeros(),
            },
            Self::Circle {
                center,
                radius,
                period,
                vertical_amplitude,
            } => {
                let w = 2.0 * std::f64::consts::PI / period;
                let (s, c) = (w * t).sin_cos();
                let (s2, c2) = (2.0 * w * t).sin_cos();
                let az = *vertical_amplitude;
                Kinematics {
                    p: center + Vector3::new(radius * c, radius * s, az * s2),
                    v: Vector3::new(-radius * w * s, radius * w * c, 2.0 * w * az * c2),
                    a: Vector3::new(-radius * w * w * c, -radius * w * w * s, -4.0 * w * w * az * s2),
                }
            }
            Self::Lemniscate {
                center,
                size,
                period,
                vertical_amplitude,
            } => {
                let w = 2.0 * std::f64::consts::PI / period;
                let (s, c) = (w * t).sin_cos();
                let (s2, c2) = (2.0 * w * t).sin_cos();
                let a = *size;
                let az = *vertical_amplitude;
                Kinematics {
                    p: center + Vector3::new(a * s, 0.5 * a * s2, az * s2),
                    v: Vector3::new(a * w * c, a * w * c2, 2.0 * w * az * c2),
                    a: Vector3::new(-a * w * w * s, -2.0 * a * w * w * s2, -4.0 * w * w * az * s2),
                }
            }
            Self::Polyline {
                waypoints,
                segment_duration,
            } => polyline_kinematics(waypoints, *segment_duration, t),
        }
    }
}

fn polyline_kinematics(waypoints: &[Vector3<f64>], seg: f64, t: f64) -> Kinematics {
    let n = waypoints.len();
    if n == 1 || t <= 0.0 {
        return Kinematics {
            p: waypoints[0],
            v: Vector3::zeros(),
            a: Vector3::zeros(),
        };
    }
    let idx = ((t / seg).floor() as usize).min(n - 2);
    let tau = ((t - idx as f64 * seg) / seg).clamp(0.0, 1.0);
    let (a, b) = (waypoints[idx], waypoints[idx + 1]);
    // s(τ) = 10τ³ − 15τ⁴ + 6τ⁵ has zero first and second derivatives at both ends.
    let s = tau.powi(3) * (10.0 - 15.0 * tau + 6.0 * tau * tau);
    let ds = 30.0 * tau * tau * (1.0 - tau) * (1.0 - tau) / seg;
    let dds = 60.0 * tau * (1.0 - tau) * (1.0 - 2.0 * tau) / (seg * seg);
    let d = b - a;
    Kinematics {
        p: a + d * s,
        v: d * ds,
        a: d * dds,
    }
}

/// One instant of the simulated flight, with every quantity the sensor
/// models need.
#[derive(Debug, Clone, Copy)]
pub struct TruthPoint {
    pub t: f64,
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub a: Vector3<f64>,
    pub q: UnitQuaternion<f64>,
    pub omega_b: Vector3<f64>,
    pub f_w: Vector3<f64>,
    pub f_b: Vector3<f64>,
    /// Mass-normalized collective thrust along body z.
    pub thrust: f64,
}

impl TruthPoint {
    /// Specific force in the body frame, `Rᵀ(a − g) = T + f_ext`.
    pub fn specific_force(&self) -> Vector3<f64> {
        self.q.inverse_transform_vector(&(self.a - gravity()))
    }
}

/// Trajectory plus external-force profile; attitude is derived so that the
/// thrust required by the dynamics is along body z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub trajectory: TrajectorySpec,
    pub force: ForceProfile,
    pub duration: f64,
    #[serde(default)]
    pub yaw: f64,
}

const RATE_STEP: f64 = 1e-5;

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::invalid(format!("duration {} must be > 0", self.duration)));
        }
        self.trajectory.validate()?;
        self.force.validate()
    }

    fn attitude(&self, t: f64) -> Result<(Matrix3<f64>, Kinematics, Vector3<f64>, f64)> {
        let kin = self.trajectory.kinematics(t);
        let f_w = self.force.force_world(t, &kin.p);
        let thrust_w = kin.a - f_w - gravity();
        let mag = thrust_w.norm();
        if !(thrust_w.z > 0.0 && mag > 1e-6) {
            return Err(Error::InfeasibleTrajectory {
                t,
                constraint: format!(
                    "required collective thrust {:?} must point upward (tilt below 90 deg, thrust > 0)",
                    thrust_w.as_slice()
                ),
            });
        }
        let zb = thrust_w / mag;
        let xc = Vector3::new(self.yaw.cos(), self.yaw.sin(), 0.0);
        let yb = zb.cross(&xc).normalize();
        let xb = yb.cross(&zb);
        Ok((Matrix3::from_columns(&[xb, yb, zb]), kin, f_w, mag))
    }

    pub fn state_at(&self, t: f64) -> Result<TruthPoint> {
        let (r, kin, f_w, thrust) = self.attitude(t)?;
        let (rm, ..) = self.attitude(t - RATE_STEP)?;
        let (rp, ..) = self.attitude(t + RATE_STEP)?;
        let omega_b = log_so3(&(rm.transpose() * rp)) / (2.0 * RATE_STEP);
        let q = UnitQuaternion::from_matrix(&r);
        Ok(TruthPoint {
            t,
            p: kin.p,
            v: kin.v,
            a: kin.a,
            q,
            omega_b,
            f_w,
            f_b: r.transpose() * f_w,
            thrust,
        })
    }
}

/// Samples a force-free trajectory at `rate` Hz over `[0, duration]`.
pub fn generate_trajectory(spec: &TrajectorySpec, duration: f64, rate: f64) -> Result<Vec<GroundTruthSample>> {
    if !(duration > 0.0) || !(rate > 0.0) {
        return Err(Error::invalid("duration and rate must be positive"));
    }
    let scenario = Scenario {
        trajectory: spec.clone(),
        force: ForceProfile::Zero,
        duration,
        yaw: 0.0,
    };
    scenario.validate()?;
    uniform_grid(duration, rate)
        .into_iter()
        .map(|t| {
            let s = scenario.state_at(t)?;
            Ok(GroundTruthSample {
                t,
                p_w: s.p,
                v_w: s.v,
                q_wb: s.q,
                f_ext_b: Vector3::zeros(),
                b_a: Vector3::zeros(),
                b_w: Vector3::zeros(),
            })
        })
        .collect()
}

/// `i / rate` for `i = 0 ..= ⌊duration·rate⌋`.
pub fn uniform_grid(duration: f64, rate: f64) -> Vec<f64> {
    let n = (duration * rate + 1e-9).floor() as usize;
    (0..=n).map(|i| i as f64 / rate).collect()
}
