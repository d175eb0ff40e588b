//! Preintegration of the high-rate streams between keyframes: the
//! thrust/external-force block and the standard inertial block.

mod dynamics;
pub(crate) mod inertial;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{ImuSample, NoiseConfig, RotorSpeedSample, VehicleParams};

pub use dynamics::{DynCorrected, DynPreintegration, DYN_ERR_DIM, DYN_REPORT_DIM};
pub use inertial::{ImuCorrected, ImuPreintegration};

/// IMU tick with the rotor-derived thrust interpolated to its timestamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusedSample {
    pub t: f64,
    pub accel: Vector3<f64>,
    pub gyro: Vector3<f64>,
    /// Mass-normalized collective thrust, `[0, 0, Σ τ_i ω_i² / m]`.
    pub thrust: Vector3<f64>,
}

impl FusedSample {
    pub fn is_finite(&self) -> bool {
        self.t.is_finite()
            && self
                .accel
                .iter()
                .chain(self.gyro.iter())
                .chain(self.thrust.iter())
                .all(|v| v.is_finite())
    }

    /// Linear interpolation of all fields between `a` and `b`.
    pub fn lerp(a: &Self, b: &Self, t: f64) -> Self {
        let s = if b.t > a.t { (t - a.t) / (b.t - a.t) } else { 0.0 };
        Self {
            t,
            accel: a.accel.lerp(&b.accel, s),
            gyro: a.gyro.lerp(&b.gyro, s),
            thrust: a.thrust.lerp(&b.thrust, s),
        }
    }
}

/// Merges IMU and rotor streams at the IMU rate. Thrust is interpolated
/// linearly between the bracketing rotor samples and held constant outside
/// the rotor stream.
pub fn fuse_streams(
    imu: &[ImuSample],
    rotor: &[RotorSpeedSample],
    vehicle: &VehicleParams,
) -> Result<Vec<FusedSample>> {
    if imu.is_empty() {
        return Ok(Vec::new());
    }
    if rotor.is_empty() {
        return Err(Error::invalid("fuse_streams: rotor stream is empty"));
    }
    vehicle.validate()?;
    let mut j = 0;
    Ok(imu
        .iter()
        .map(|s| {
            while j + 1 < rotor.len() && rotor[j + 1].t <= s.t + 1e-9 {
                j += 1;
            }
            let ta = vehicle.thrust_from_speeds(&rotor[j].omega_rotor);
            let thrust = match rotor.get(j + 1) {
                Some(b) if s.t > rotor[j].t && b.t > rotor[j].t => {
                    let tb = vehicle.thrust_from_speeds(&b.omega_rotor);
                    ta + (tb - ta) * (s.t - rotor[j].t) / (b.t - rotor[j].t)
                }
                _ => ta,
            };
            FusedSample {
                t: s.t,
                accel: s.accel,
                gyro: s.gyro,
                thrust: Vector3::new(0.0, 0.0, thrust),
            }
        })
        .collect())
}

/// Sample nodes covering `[t0, t1]`: interpolated end points plus every tick
/// strictly inside. Ticks within `1e-9` s of an end point are merged into it.
pub fn interval_nodes(fused: &[FusedSample], t0: f64, t1: f64) -> Result<Vec<FusedSample>> {
    const EPS: f64 = 1e-9;
    if !(t1 > t0) {
        return Err(Error::invalid(format!("empty interval [{t0}, {t1}]")));
    }
    if fused.is_empty() || fused[0].t > t0 + EPS || fused[fused.len() - 1].t < t1 - EPS {
        return Err(Error::invalid(format!(
            "interval [{t0:.4}, {t1:.4}] is not covered by the sensor stream"
        )));
    }
    let at = |t: f64| -> FusedSample {
        let idx = fused.partition_point(|s| s.t < t - EPS);
        if idx < fused.len() && (fused[idx].t - t).abs() <= EPS {
            return FusedSample { t, ..fused[idx] };
        }
        let a = &fused[idx - 1];
        let b = &fused[idx.min(fused.len() - 1)];
        FusedSample::lerp(a, b, t)
    };
    let mut nodes = vec![at(t0)];
    let start = fused.partition_point(|s| s.t <= t0 + EPS);
    for s in fused[start..].iter().take_while(|s| s.t < t1 - EPS) {
        nodes.push(*s);
    }
    nodes.push(at(t1));
    Ok(nodes)
}

/// Continuous-time noise densities used to weight the preintegrated terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcessNoise {
    /// Per-sample accelerometer noise, m/s².
    pub sigma_a: f64,
    /// Per-sample gyroscope noise, rad/s.
    pub sigma_w: f64,
    /// Per-sample thrust noise, m/s².
    pub sigma_t: f64,
    /// Bias random walks, per √s.
    pub sigma_ba: f64,
    pub sigma_bw: f64,
}

impl ProcessNoise {
    pub fn zero() -> Self {
        Self {
            sigma_a: 0.0,
            sigma_w: 0.0,
            sigma_t: 0.0,
            sigma_ba: 0.0,
            sigma_bw: 0.0,
        }
    }

    /// Noise model for a block propagated at the IMU rate. Each rotor sample
    /// spans `imu_hz / rmu_hz` ticks, so its per-tick sigma is inflated by the
    /// square root of that ratio to keep the integrated variance right.
    pub fn from_config(noise: &NoiseConfig) -> Self {
        let hold = (noise.imu_hz / noise.rmu_hz).max(1.0);
        Self {
            sigma_a: noise.sigma_a,
            sigma_w: noise.sigma_w,
            sigma_t: noise.sigma_t * hold.sqrt(),
            sigma_ba: noise.sigma_ba,
            sigma_bw: noise.sigma_bw,
        }
    }
}
