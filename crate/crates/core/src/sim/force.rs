use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::GroundTruthSample;

/// Mass-normalized external force generator (m/s²), defined in the world frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ForceProfile {
    Zero,
    ConstantPayload {
        force_w: Vector3<f64>,
    },
    /// Hooke's law pull toward `anchor` once the rope is stretched past `rest_length`.
    ElasticRope {
        anchor: Vector3<f64>,
        stiffness: f64,
        rest_length: f64,
    },
    /// Constant push inside `[start, stop]`. Edges are blended with a
    /// raised-cosine of width `ramp` so the thrust-aligned attitude stays
    /// continuous; `ramp = 0` gives a hard step.
    WindGust {
        direction: Vector3<f64>,
        magnitude: f64,
        start: f64,
        stop: f64,
        #[serde(default = "default_ramp")]
        ramp: f64,
    },
}

fn default_ramp() -> f64 {
    0.25
}

impl ForceProfile {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Zero => "zero",
            Self::ConstantPayload { .. } => "constant_payload",
            Self::ElasticRope { .. } => "elastic_rope",
            Self::WindGust { .. } => "wind_gust",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |v: &Vector3<f64>| v.iter().all(|x| x.is_finite());
        let ok = match self {
            Self::Zero => true,
            Self::ConstantPayload { force_w } => finite(force_w),
            Self::ElasticRope {
                anchor,
                stiffness,
                rest_length,
            } => {
                finite(anchor)
                    && stiffness.is_finite()
                    && *stiffness >= 0.0
                    && rest_length.is_finite()
                    && *rest_length >= 0.0
            }
            Self::WindGust {
                direction,
                magnitude,
                start,
                stop,
                ramp,
            } => {
                finite(direction)
                    && direction.norm() > 0.0
                    && magnitude.is_finite()
                    && start.is_finite()
                    && stop.is_finite()
                    && start <= stop
                    && ramp.is_finite()
                    && *ramp >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad force profile parameters: {self:?}")))
        }
    }

    pub fn force_world(&self, t: f64, p: &Vector3<f64>) -> Vector3<f64> {
        match self {
            Self::Zero => Vector3::zeros(),
            Self::ConstantPayload { force_w } => *force_w,
            Self::ElasticRope {
                anchor,
                stiffness,
                rest_length,
            } => {
                let d = p - anchor;
                let len = d.norm();
                let stretch = len - rest_length;
                if stretch <= 0.0 || len == 0.0 {
                    Vector3::zeros()
                } else {
                    -stiffness * stretch * d / len
                }
            }
            Self::WindGust {
                direction,
                magnitude,
                start,
                stop,
                ramp,
            } => {
                let w = gust_window(t, *start, *stop, *ramp);
                direction.normalize() * (*magnitude * w)
            }
        }
    }
}

fn gust_window(t: f64, start: f64, stop: f64, ramp: f64) -> f64 {
    if t < start || t > stop {
        return 0.0;
    }
    if ramp <= 0.0 {
        return 1.0;
    }
    let edge = (t - start).min(stop - t);
    if edge >= ramp {
        1.0
    } else {
        0.5 - 0.5 * (std::f64::consts::PI * edge / ramp).cos()
    }
}

/// Fills `f_ext_b` of every sample from the profile, rotating the world-frame
/// force into each sample's body frame.
pub fn apply_force_profile(traj: &[GroundTruthSample], profile: &ForceProfile) -> Result<Vec<GroundTruthSample>> {
    if traj.is_empty() {
        return Err(Error::invalid("apply_force_profile: empty trajectory"));
    }
    profile.validate()?;
    Ok(traj
        .iter()
        .map(|s| GroundTruthSample {
            f_ext_b: s.q_wb.inverse_transform_vector(&profile.force_world(s.t, &s.p_w)),
            ..*s
        })
        .collect())
}
