//! Per-rotor thrust coefficient identification from hover segments by
//! recursive least squares.

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GRAVITY_MAGNITUDE;
use crate::sim::SensorLog;

/// Estimate of the four thrust coefficients `τ_i` (thrust per rotor = `τ_i ω_i²`, N·s²).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlsState {
    pub theta: Vector4<f64>,
    /// Diagonal: the rotors are decoupled under the equal-split hover model.
    pub p: Matrix4<f64>,
    pub forgetting: f64,
    pub n_updates: [usize; 4],
}

impl Default for RlsState {
    fn default() -> Self {
        Self::new(1e-4, 1e2, 0.999).expect("valid defaults")
    }
}

impl RlsState {
    pub fn new(theta0: f64, p0: f64, forgetting: f64) -> Result<Self> {
        if !(forgetting > 0.9 && forgetting <= 1.0) {
            return Err(Error::invalid(format!(
                "forgetting factor {forgetting} must lie in (0.9, 1]"
            )));
        }
        if !(p0.is_finite() && p0 > 0.0 && theta0.is_finite()) {
            return Err(Error::invalid("initial covariance must be > 0 and theta finite"));
        }
        Ok(Self {
            theta: Vector4::repeat(theta0),
            p: Matrix4::identity() * p0,
            forgetting,
            n_updates: [0; 4],
        })
    }
}

/// One RLS step per rotor: regressor `ω_i²`, target `m g / 4`.
/// Rotors reporting zero speed are skipped.
pub fn rls_update(state: &RlsState, omega: &Vector4<f64>, mass: f64) -> Result<RlsState> {
    if !(mass.is_finite() && mass > 0.0) {
        return Err(Error::invalid("mass must be > 0"));
    }
    let y = mass * GRAVITY_MAGNITUDE / 4.0;
    let lam = state.forgetting;
    let mut next = state.clone();
    for i in 0..4 {
        let x = omega[i] * omega[i];
        if !(x.is_finite() && x > 0.0) {
            continue;
        }
        let p = state.p[(i, i)];
        let denom = lam + x * p * x;
        let k = p * x / denom;
        next.theta[i] = state.theta[i] + k * (y - x * state.theta[i]);
        // Scalar form of `(P - k x P) / λ` without the cancellation.
        next.p[(i, i)] = p / denom;
        next.n_updates[i] += 1;
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoverThresholds {
    /// rad/s
    pub max_gyro: f64,
    /// Allowed deviation of ‖accel‖ from g, m/s².
    pub max_accel_dev: f64,
    /// s
    pub min_duration: f64,
}

impl Default for HoverThresholds {
    fn default() -> Self {
        Self {
            max_gyro: 0.05,
            max_accel_dev: 0.3,
            min_duration: 1.0,
        }
    }
}

/// Maximal time spans `[t0, t1]` of near-hover IMU readings lasting at least `min_duration`.
pub fn detect_hover(log: &SensorLog, th: &HoverThresholds) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut run: Option<(f64, f64)> = None;
    let mut close = |run: &mut Option<(f64, f64)>| {
        if let Some((a, b)) = run.take() {
            if b - a >= th.min_duration - 1e-9 {
                out.push((a, b));
            }
        }
    };
    for s in &log.imu {
        let hover = s.gyro.norm() < th.max_gyro && (s.accel.norm() - GRAVITY_MAGNITUDE).abs() < th.max_accel_dev;
        if hover {
            run = Some(match run {
                Some((a, _)) => (a, s.t),
                None => (s.t, s.t),
            });
        } else {
            close(&mut run);
        }
    }
    close(&mut run);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifyResult {
    pub tau: [f64; 4],
    /// RMS of the per-rotor thrust residual `m g / 4 − τ_i ω_i²` over the used samples, N.
    pub residual_rms: f64,
    pub n_samples: usize,
    pub segments: Vec<(f64, f64)>,
}

/// Runs RLS over every rotor sample inside a detected hover segment.
pub fn identify_log(log: &SensorLog, th: &HoverThresholds, init: &RlsState) -> Result<IdentifyResult> {
    let mass = log.meta.mass;
    let segments = detect_hover(log, th);
    let samples: Vec<Vector4<f64>> = log
        .rotor
        .iter()
        .filter(|s| segments.iter().any(|(a, b)| s.t >= *a && s.t <= *b))
        .map(|s| s.omega_rotor)
        .collect();
    let mut state = init.clone();
    for w in &samples {
        state = rls_update(&state, w, mass)?;
    }
    let y = mass * GRAVITY_MAGNITUDE / 4.0;
    let mut se = 0.0;
    let mut n = 0usize;
    for w in &samples {
        for i in 0..4 {
            if w[i] > 0.0 {
                se += (y - state.theta[i] * w[i] * w[i]).powi(2);
                n += 1;
            }
        }
    }
    Ok(IdentifyResult {
        tau: [state.theta[0], state.theta[1], state.theta[2], state.theta[3]],
        residual_rms: if n > 0 { (se / n as f64).sqrt() } else { 0.0 },
        n_samples: samples.len(),
        segments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{
        synthesize_sensors, CameraConfig, ForceProfile, ImuSample, NoiseConfig, Scenario, TrajectoryKind,
        TrajectorySpec, VehicleParams,
    };
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn noiseless_hover_recovers_exact_coefficient() {
        let mut s = RlsState::default();
        for _ in 0..10 {
            s = rls_update(&s, &Vector4::repeat(100.0), 1.0).unwrap();
        }
        for i in 0..4 {
            assert!((s.theta[i] - 9.79 / 4.0 / 1e4).abs() < 1e-9);
        }
        assert_eq!(s.n_updates, [10; 4]);
    }

    #[test]
    fn zero_updates_and_zero_speed_leave_theta_unchanged() {
        let s = RlsState::default();
        assert_eq!(s.theta, Vector4::repeat(1e-4));
        let t = rls_update(&s, &Vector4::new(0.0, 100.0, 0.0, 100.0), 1.0).unwrap();
        assert_eq!(t.theta[0], 1e-4);
        assert_eq!(t.theta[2], 1e-4);
        assert_eq!(t.n_updates, [0, 1, 0, 1]);
        assert!(rls_update(&s, &Vector4::repeat(100.0), 0.0).is_err());
        assert!(RlsState::new(1e-4, 1e2, 0.5).is_err());
    }

    #[test]
    fn unit_forgetting_matches_batch_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let speed = Normal::new(600.0, 40.0).unwrap();
        let mut s = RlsState::new(1e-4, 1e2, 1.0).unwrap();
        let mut sxx = Vector4::<f64>::zeros();
        let mut sxy = Vector4::<f64>::zeros();
        let y = 1.3 * 9.79 / 4.0;
        for _ in 0..200 {
            let w = Vector4::from_fn(|_, _| speed.sample(&mut rng));
            s = rls_update(&s, &w, 1.3).unwrap();
            for i in 0..4 {
                let x = w[i] * w[i];
                sxx[i] += x * x;
                sxy[i] += x * y;
            }
        }
        for i in 0..4 {
            let batch = sxy[i] / sxx[i];
            assert!(((s.theta[i] - batch) / batch).abs() < 1e-9);
        }
    }

    #[test]
    fn covariance_stays_positive() {
        let mut s = RlsState::default();
        for k in 0..300 {
            s = rls_update(&s, &Vector4::repeat(500.0 + k as f64), 1.2).unwrap();
            assert!((0..4).all(|i| s.p[(i, i)] > 0.0));
            assert!(s.theta.iter().all(|v| v.is_finite()));
        }
    }

    fn imu_phase(t0: f64, t1: f64, gyro: f64) -> Vec<ImuSample> {
        let n = ((t1 - t0) * 100.0).round() as usize;
        (0..n)
            .map(|i| ImuSample {
                t: t0 + i as f64 * 0.01,
                accel: Vector3::new(0.0, 0.0, 9.79),
                gyro: Vector3::new(0.0, 0.0, gyro),
            })
            .collect()
    }

    fn hover_log(duration: f64) -> SensorLog {
        let scenario = Scenario {
            trajectory: TrajectorySpec::default_for(TrajectoryKind::Hover, duration),
            force: ForceProfile::Zero,
            duration,
            yaw: 0.0,
        };
        synthesize_sensors(
            &scenario,
            &VehicleParams::default(),
            &NoiseConfig::default(),
            &CameraConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn hover_segments() {
        let mut log = hover_log(3.0);
        let th = HoverThresholds::default();
        let seg = detect_hover(&log, &th);
        assert_eq!(seg.len(), 1);
        assert!(seg[0].0 < 0.01 && seg[0].1 > 2.99);

        log.imu = [
            imu_phase(0.0, 2.0, 0.0),
            imu_phase(2.0, 3.0, 0.8),
            imu_phase(3.0, 5.5, 0.0),
        ]
        .concat();
        let seg = detect_hover(&log, &th);
        assert_eq!(seg.len(), 2);
        assert!((seg[0].1 - 1.99).abs() < 1e-9 && (seg[1].0 - 3.0).abs() < 1e-9);

        log.imu = imu_phase(0.0, 5.0, 0.5);
        assert!(detect_hover(&log, &th).is_empty());
    }

    #[test]
    fn identifies_coefficients_from_hover_log() {
        let log = hover_log(6.0);
        let r = identify_log(&log, &HoverThresholds::default(), &RlsState::default()).unwrap();
        let truth = VehicleParams::default().thrust_coeffs;
        let rel: Vec<f64> = (0..4).map(|i| ((r.tau[i] - truth[i]) / truth[i]).abs()).collect();
        assert!(rel.iter().all(|e| *e < 0.02), "{rel:?}");
        assert!(r.n_samples > 500);
        // Thrust predicted with the identified coefficients is no worse than the coefficients.
        let est = VehicleParams {
            thrust_coeffs: r.tau,
            ..VehicleParams::default()
        };
        let worst = rel.iter().cloned().fold(0.0, f64::max);
        for s in log.rotor.iter().step_by(50) {
            let t_true = VehicleParams::default().thrust_from_speeds(&s.omega_rotor);
            let t_est = est.thrust_from_speeds(&s.omega_rotor);
            assert!(((t_est - t_true) / t_true).abs() <= worst + 1e-12);
        }
    }
}
