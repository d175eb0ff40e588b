//! Quadrotor flight simulator: ground-truth trajectories, external force
//! profiles, noisy IMU / rotor-speed / landmark streams, and the on-disk
//! dataset format.

pub mod dataset;
pub mod force;
pub mod sensors;
pub mod trajectory;

use nalgebra::{UnitQuaternion, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

pub use dataset::{read_log, write_log};
pub use force::{apply_force_profile, ForceProfile};
pub use sensors::synthesize_sensors;
pub use trajectory::{generate_trajectory, Scenario, TrajectoryKind, TrajectorySpec, TruthPoint};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthSample {
    pub t: f64,
    pub p_w: Vector3<f64>,
    pub v_w: Vector3<f64>,
    pub q_wb: UnitQuaternion<f64>,
    /// Mass-normalized external force in the body frame, m/s².
    pub f_ext_b: Vector3<f64>,
    pub b_a: Vector3<f64>,
    pub b_w: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    /// Specific force in the body frame, m/s².
    pub accel: Vector3<f64>,
    pub gyro: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotorSpeedSample {
    pub t: f64,
    pub omega_rotor: Vector4<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkObservation {
    pub frame_t: f64,
    pub landmark_id: u32,
    /// Ideal pinhole coordinates `(x/z, y/z)` in the camera (= body) frame.
    pub bearing: Vector2<f64>,
    /// Measurement std-dev in normalized image units.
    pub pixel_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Accelerometer white noise per sample, m/s².
    pub sigma_a: f64,
    /// Gyroscope white noise per sample, rad/s.
    pub sigma_w: f64,
    /// Mass-normalized thrust noise per rotor-speed sample, m/s².
    pub sigma_t: f64,
    /// Accelerometer bias random walk, m/s² per √s.
    pub sigma_ba: f64,
    /// Gyroscope bias random walk, rad/s per √s.
    pub sigma_bw: f64,
    /// Landmark pixel noise, px.
    pub sigma_px: f64,
    pub imu_hz: f64,
    pub rmu_hz: f64,
    pub cam_hz: f64,
    pub initial_ba: Vector3<f64>,
    pub initial_bw: Vector3<f64>,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma_a: 0.02,
            sigma_w: 0.002,
            sigma_t: 0.05,
            sigma_ba: 1e-4,
            sigma_bw: 1e-5,
            sigma_px: 1.0,
            imu_hz: 400.0,
            rmu_hz: 100.0,
            cam_hz: 30.0,
            initial_ba: Vector3::zeros(),
            initial_bw: Vector3::zeros(),
            seed: 1,
        }
    }
}

impl NoiseConfig {
    pub fn noiseless() -> Self {
        Self {
            sigma_a: 0.0,
            sigma_w: 0.0,
            sigma_t: 0.0,
            sigma_ba: 0.0,
            sigma_bw: 0.0,
            sigma_px: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let sigmas = [
            self.sigma_a,
            self.sigma_w,
            self.sigma_t,
            self.sigma_ba,
            self.sigma_bw,
            self.sigma_px,
        ];
        let rates = [self.imu_hz, self.rmu_hz, self.cam_hz];
        if sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(crate::Error::invalid("noise sigmas must be finite and >= 0"));
        }
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(crate::Error::invalid("sensor rates must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleParams {
    pub mass: f64,
    /// Per-rotor thrust coefficient τ_f, N·s²/rad².
    pub thrust_coeffs: [f64; 4],
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            mass: 1.2,
            thrust_coeffs: [1.20e-5, 1.22e-5, 1.18e-5, 1.21e-5],
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return Err(crate::Error::invalid("mass must be > 0"));
        }
        if self.thrust_coeffs.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
            return Err(crate::Error::invalid("thrust coefficients must be > 0"));
        }
        Ok(())
    }

    /// Mass-normalized collective thrust `Σ τ_i ω_i² / m`.
    pub fn thrust_from_speeds(&self, omega: &Vector4<f64>) -> f64 {
        omega
            .iter()
            .zip(self.thrust_coeffs.iter())
            .map(|(w, c)| c * w * w)
            .sum::<f64>()
            / self.mass
    }
}

/// Ideal body-centred pinhole camera looking along body +z, and the
/// synthetic landmark field it observes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraConfig {
    pub focal_px: f64,
    /// Half field of view as a tangent; 1.0 is a 90° cone.
    pub tan_half_fov: f64,
    pub min_depth: f64,
    pub max_range: f64,
    pub max_features: usize,
    pub landmark_count: usize,
    pub min_visible: usize,
    /// Horizontal margin of the landmark box around the trajectory, m.
    pub field_margin: f64,
    /// Landmark box spans `[z_max + height_low, z_max + height_high]`.
    pub field_height_low: f64,
    pub field_height_high: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            focal_px: 460.0,
            tan_half_fov: 1.0,
            min_depth: 0.2,
            max_range: 25.0,
            max_features: 60,
            landmark_count: 500,
            min_visible: 20,
            field_margin: 6.0,
            field_height_low: 2.0,
            field_height_high: 7.0,
        }
    }
}

impl CameraConfig {
    /// Pixel noise expressed in normalized image units.
    pub fn normalized_sigma(&self, sigma_px: f64) -> f64 {
        sigma_px / self.focal_px
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogMeta {
    pub mass: f64,
    pub thrust_coeffs: [f64; 4],
    pub gravity: f64,
    pub noise: NoiseConfig,
    pub seed: u64,
    pub camera: CameraConfig,
    #[serde(default)]
    pub scenario: Option<Scenario>,
}

impl LogMeta {
    pub fn vehicle(&self) -> VehicleParams {
        VehicleParams {
            mass: self.mass,
            thrust_coeffs: self.thrust_coeffs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorLog {
    pub meta: LogMeta,
    pub imu: Vec<ImuSample>,
    pub rotor: Vec<RotorSpeedSample>,
    pub cam: Vec<LandmarkObservation>,
    pub truth: Vec<GroundTruthSample>,
}

impl SensorLog {
    pub fn is_empty(&self) -> bool {
        self.imu.is_empty() && self.cam.is_empty()
    }

    /// Checks time ordering and finiteness of every stream.
    pub fn validate(&self) -> crate::Result<()> {
        fn strictly_increasing(name: &str, ts: impl Iterator<Item = f64>) -> crate::Result<()> {
            let mut prev = f64::NEG_INFINITY;
            for (i, t) in ts.enumerate() {
                if !t.is_finite() || t <= prev {
                    return Err(crate::Error::Validation(format!(
                        "{name}: timestamp {t} at row {} is not strictly increasing",
                        i + 1
                    )));
                }
                prev = t;
            }
            Ok(())
        }
        strictly_increasing("imu", self.imu.iter().map(|s| s.t))?;
        strictly_increasing("rotor", self.rotor.iter().map(|s| s.t))?;
        strictly_increasing("truth", self.truth.iter().map(|s| s.t))?;
        let mut prev = f64::NEG_INFINITY;
        for (i, o) in self.cam.iter().enumerate() {
            if !o.frame_t.is_finite() || o.frame_t < prev {
                return Err(crate::Error::Validation(format!(
                    "cam: timestamp {} at row {} is out of order",
                    o.frame_t,
                    i + 1
                )));
            }
            prev = o.frame_t;
        }
        if self
            .imu
            .iter()
            .any(|s| !(s.accel.iter().chain(s.gyro.iter()).all(|v| v.is_finite())))
        {
            return Err(crate::Error::Validation("imu: non-finite sample".into()));
        }
        if self
            .rotor
            .iter()
            .any(|s| s.omega_rotor.iter().any(|w| !(w.is_finite() && *w >= 0.0)))
        {
            return Err(crate::Error::Validation("rotor: speeds must be finite and >= 0".into()));
        }
        if self.cam.iter().any(|o| !o.bearing.iter().all(|v| v.is_finite())) {
            return Err(crate::Error::Validation("cam: non-finite bearing".into()));
        }
        Ok(())
    }

    /// Ground truth sample closest in time to `t`, if within `tol` seconds.
    pub fn truth_at(&self, t: f64, tol: f64) -> Option<&GroundTruthSample> {
        nearest_by_time(&self.truth, t, tol, |s| s.t)
    }

    /// Observations grouped by frame timestamp, in time order.
    pub fn frames(&self) -> Vec<(f64, Vec<LandmarkObservation>)> {
        let mut out: Vec<(f64, Vec<LandmarkObservation>)> = Vec::new();
        for o in &self.cam {
            match out.last_mut() {
                Some((t, obs)) if *t == o.frame_t => obs.push(*o),
                _ => out.push((o.frame_t, vec![*o])),
            }
        }
        out
    }
}

/// Binary search for the element nearest to `t` in a time-sorted slice.
pub fn nearest_by_time<T>(items: &[T], t: f64, tol: f64, key: impl Fn(&T) -> f64) -> Option<&T> {
    if items.is_empty() {
        return None;
    }
    let idx = items.partition_point(|s| key(s) < t);
    let mut best: Option<&T> = None;
    for i in [idx.saturating_sub(1), idx.min(items.len() - 1)] {
        let cand = &items[i];
        if (key(cand) - t).abs() <= tol && best.is_none_or(|b| (key(cand) - t).abs() < (key(b) - t).abs()) {
            best = Some(cand);
        }
    }
    best
}
