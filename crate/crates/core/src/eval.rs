//! Trajectory and force error metrics against ground truth.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::EstimateRecord;
use crate::sim::{nearest_by_time, GroundTruthSample};

/// Estimates and truth are paired when their timestamps differ by at most this, s.
pub const ALIGN_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForceMetrics {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// RMSE of `‖F̂‖ − ‖F‖`.
    pub norm: f64,
    /// RMSE of `‖F̂ − F‖`.
    pub vector: f64,
    pub samples: usize,
}

impl ForceMetrics {
    fn scaled(&self, k: f64) -> Self {
        Self {
            x: self.x * k,
            y: self.y * k,
            z: self.z * k,
            norm: self.norm * k,
            vector: self.vector * k,
            samples: self.samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub trans_rmse_m: f64,
    pub rot_rmse_deg: f64,
    pub pose_samples: usize,
    /// Mass-normalized force errors, m/s².
    pub force: Option<ForceMetrics>,
    /// The same errors in newtons.
    pub force_newton: Option<ForceMetrics>,
    pub diverged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runtime_s: Option<f64>,
}

/// Mean of `R_kᵀ f_w(τ)` over `[t0, t1]` from the truth samples (trapezoid rule).
pub fn truth_interval_force(truth: &[GroundTruthSample], t0: f64, t1: f64) -> Option<Vector3<f64>> {
    let eps = 1e-9;
    let start = truth.partition_point(|s| s.t < t0 - eps);
    let pts: Vec<&GroundTruthSample> = truth[start..].iter().take_while(|s| s.t <= t1 + eps).collect();
    if pts.len() < 2 {
        return None;
    }
    let rk = pts[0].q_wb.inverse();
    let fw = |s: &GroundTruthSample| rk * (s.q_wb * s.f_ext_b);
    let mut acc = Vector3::zeros();
    for w in pts.windows(2) {
        acc += 0.5 * (fw(w[0]) + fw(w[1])) * (w[1].t - w[0].t);
    }
    let span = pts[pts.len() - 1].t - pts[0].t;
    (span > 0.0).then(|| acc / span)
}

/// Aligns estimates to truth by timestamp and computes the error metrics.
pub fn evaluate(estimates: &[EstimateRecord], truth: &[GroundTruthSample], mass: Option<f64>) -> Result<MetricsReport> {
    let mut est = estimates.to_vec();
    est.sort_by(|a, b| a.t.total_cmp(&b.t));
    let mut se_p = 0.0;
    let mut se_r = 0.0;
    let mut n = 0usize;
    for e in &est {
        if let Some(s) = nearest_by_time(truth, e.t, ALIGN_TOLERANCE, |s| s.t) {
            se_p += (e.state.p - s.p_w).norm_squared();
            se_r += e.state.q.angle_to(&s.q_wb).to_degrees().powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Validation(
            "estimate and truth have no overlapping timestamps".into(),
        ));
    }
    let mut se_f = Vector3::<f64>::zeros();
    let mut se_norm = 0.0;
    let mut se_vec = 0.0;
    let mut nf = 0usize;
    for w in est.windows(2) {
        let Some(f) = w[0].force else { continue };
        let Some(tf) = truth_interval_force(truth, w[0].t, w[1].t) else {
            continue;
        };
        let d = f - tf;
        se_f += d.component_mul(&d);
        se_norm += (f.norm() - tf.norm()).powi(2);
        se_vec += d.norm_squared();
        nf += 1;
    }
    let force = (nf > 0).then(|| {
        let k = nf as f64;
        ForceMetrics {
            x: (se_f.x / k).sqrt(),
            y: (se_f.y / k).sqrt(),
            z: (se_f.z / k).sqrt(),
            norm: (se_norm / k).sqrt(),
            vector: (se_vec / k).sqrt(),
            samples: nf,
        }
    });
    Ok(MetricsReport {
        trans_rmse_m: (se_p / n as f64).sqrt(),
        rot_rmse_deg: (se_r / n as f64).sqrt(),
        pose_samples: n,
        force_newton: force.zip(mass).map(|(f, m)| f.scaled(m)),
        force,
        diverged: false,
        runtime_s: None,
    })
}
