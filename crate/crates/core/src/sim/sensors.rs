use nalgebra::{Vector2, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::GRAVITY_MAGNITUDE;

use super::trajectory::{uniform_grid, Scenario};
use super::{
    CameraConfig, GroundTruthSample, ImuSample, LandmarkObservation, LogMeta, NoiseConfig, RotorSpeedSample, SensorLog,
    VehicleParams,
};

fn gauss3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    )
}

// Each noise source draws from its own stream so that zeroing one sigma does
// not reshuffle the others.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(id))
}

/// Landmarks scattered uniformly in a box above the flight volume (the
/// camera looks along body +z).
pub fn generate_landmarks(scenario: &Scenario, camera: &CameraConfig, seed: u64) -> Result<Vec<Vector3<f64>>> {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for t in uniform_grid(scenario.duration, 20.0) {
        let p = scenario.trajectory.kinematics(t).p;
        lo = lo.inf(&p);
        hi = hi.sup(&p);
    }
    let m = camera.field_margin;
    let lo = Vector3::new(lo.x - m, lo.y - m, hi.z + camera.field_height_low);
    let hi = Vector3::new(hi.x + m, hi.y + m, hi.z + camera.field_height_high);
    let mut rng = stream(seed, 5);
    Ok((0..camera.landmark_count)
        .map(|_| {
            Vector3::new(
                rng.random_range(lo.x..=hi.x),
                rng.random_range(lo.y..=hi.y),
                rng.random_range(lo.z..=hi.z),
            )
        })
        .collect())
}

fn merged_grid(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup_by(|x, y| (*x - *y).abs() < 1e-9);
    all
}

/// Generates the full noisy sensor log for a scenario.
///
/// The accelerometer reports specific force `Rᵀ(a − g) + b_a + n_a`; the
/// rotor speeds are back-solved from the collective thrust
/// `T = Rᵀ(a − g) − f_ext` (plus `n_T`) with an equal `m·T/4` split.
pub fn synthesize_sensors(
    scenario: &Scenario,
    vehicle: &VehicleParams,
    noise: &NoiseConfig,
    camera: &CameraConfig,
) -> Result<SensorLog> {
    scenario.validate()?;
    vehicle.validate()?;
    noise.validate()?;

    let imu_t = uniform_grid(scenario.duration, noise.imu_hz);
    let rotor_t = uniform_grid(scenario.duration, noise.rmu_hz);
    let cam_t = uniform_grid(scenario.duration, noise.cam_hz);

    // Bias random walk on the IMU grid.
    let mut walk_rng = stream(noise.seed, 1);
    let mut ba = noise.initial_ba;
    let mut bw = noise.initial_bw;
    let mut biases = Vec::with_capacity(imu_t.len());
    for (i, _) in imu_t.iter().enumerate() {
        if i > 0 {
            let dt = imu_t[i] - imu_t[i - 1];
            ba += noise.sigma_ba * dt.sqrt() * gauss3(&mut walk_rng);
            bw += noise.sigma_bw * dt.sqrt() * gauss3(&mut walk_rng);
        }
        biases.push((ba, bw));
    }
    let bias_at = |t: f64| {
        let idx = imu_t.partition_point(|x| *x <= t + 1e-12).saturating_sub(1);
        biases[idx]
    };

    let mut imu_rng = stream(noise.seed, 2);
    let mut imu = Vec::with_capacity(imu_t.len());
    for (i, &t) in imu_t.iter().enumerate() {
        let s = scenario.state_at(t)?;
        let (ba, bw) = biases[i];
        imu.push(ImuSample {
            t,
            accel: s.specific_force() + ba + noise.sigma_a * gauss3(&mut imu_rng),
            gyro: s.omega_b + bw + noise.sigma_w * gauss3(&mut imu_rng),
        });
    }

    let mut rotor_rng = stream(noise.seed, 3);
    let mut rotor = Vec::with_capacity(rotor_t.len());
    for &t in &rotor_t {
        let s = scenario.state_at(t)?;
        let n: f64 = rotor_rng.sample(StandardNormal);
        let thrust = (s.thrust + noise.sigma_t * n).max(0.0);
        let share = vehicle.mass * thrust / 4.0;
        let omega = Vector4::from_iterator(vehicle.thrust_coeffs.iter().map(|c| (share / c).sqrt()));
        rotor.push(RotorSpeedSample { t, omega_rotor: omega });
    }

    let landmarks = generate_landmarks(scenario, camera, noise.seed)?;
    let sigma = camera.normalized_sigma(noise.sigma_px);
    let mut cam_rng = stream(noise.seed, 4);
    let mut cam = Vec::new();
    for &t in &cam_t {
        let s = scenario.state_at(t)?;
        let mut visible = 0;
        for (id, l) in landmarks.iter().enumerate() {
            let pc = s.q.inverse_transform_vector(&(l - s.p));
            if pc.z < camera.min_depth || pc.norm() > camera.max_range {
                continue;
            }
            let uv = Vector2::new(pc.x / pc.z, pc.y / pc.z);
            if uv.x.abs() > camera.tan_half_fov || uv.y.abs() > camera.tan_half_fov {
                continue;
            }
            visible += 1;
            if visible > camera.max_features {
                continue;
            }
            let nu: f64 = cam_rng.sample(StandardNormal);
            let nv: f64 = cam_rng.sample(StandardNormal);
            cam.push(LandmarkObservation {
                frame_t: t,
                landmark_id: id as u32,
                bearing: uv + sigma * Vector2::new(nu, nv),
                pixel_sigma: sigma,
            });
        }
        if visible < camera.min_visible {
            return Err(Error::Validation(format!(
                "only {visible} landmarks visible at t = {t:.3} s (need {})",
                camera.min_visible
            )));
        }
    }

    let truth = merged_grid(&imu_t, &cam_t)
        .into_iter()
        .map(|t| {
            let s = scenario.state_at(t)?;
            let (b_a, b_w) = bias_at(t);
            Ok(GroundTruthSample {
                t,
                p_w: s.p,
                v_w: s.v,
                q_wb: s.q,
                f_ext_b: s.f_b,
                b_a,
                b_w,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SensorLog {
        meta: LogMeta {
            mass: vehicle.mass,
            thrust_coeffs: vehicle.thrust_coeffs,
            gravity: GRAVITY_MAGNITUDE,
            noise: noise.clone(),
            seed: noise.seed,
            camera: camera.clone(),
            scenario: Some(scenario.clone()),
        },
        imu,
        rotor,
        cam,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::force::ForceProfile;
    use crate::sim::trajectory::{TrajectoryKind, TrajectorySpec};
    use approx::assert_relative_eq;

    fn hover_scenario(force: ForceProfile) -> Scenario {
        Scenario {
            trajectory: TrajectorySpec::Hover {
                position: Vector3::new(0.0, 0.0, 1.0),
            },
            force,
            duration: 1.0,
            yaw: 0.0,
        }
    }

    fn unit_vehicle() -> VehicleParams {
        VehicleParams {
            mass: 1.0,
            thrust_coeffs: [2.4475e-4; 4],
        }
    }

    #[test]
    fn hover_measures_gravity() {
        let log = synthesize_sensors(
            &hover_scenario(ForceProfile::Zero),
            &unit_vehicle(),
            &NoiseConfig::noiseless(),
            &CameraConfig::default(),
        )
        .unwrap();
        let v = unit_vehicle();
        for s in &log.imu {
            assert_relative_eq!(s.accel, Vector3::new(0.0, 0.0, 9.79), epsilon = 1e-12);
            assert!(s.gyro.norm() < 1e-9);
        }
        for r in &log.rotor {
            assert_relative_eq!(v.thrust_from_speeds(&r.omega_rotor), 9.79, epsilon = 1e-12);
            assert_relative_eq!(r.omega_rotor[0], 100.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn hover_with_payload_needs_more_thrust() {
        let log = synthesize_sensors(
            &hover_scenario(ForceProfile::ConstantPayload {
                force_w: Vector3::new(0.0, 0.0, -2.0),
            }),
            &unit_vehicle(),
            &NoiseConfig::noiseless(),
            &CameraConfig::default(),
        )
        .unwrap();
        let v = unit_vehicle();
        assert_relative_eq!(log.imu[10].accel, Vector3::new(0.0, 0.0, 9.79), epsilon = 1e-12);
        assert_relative_eq!(v.thrust_from_speeds(&log.rotor[3].omega_rotor), 11.79, epsilon = 1e-12);
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        let scenario = Scenario {
            trajectory: TrajectorySpec::default_for(TrajectoryKind::Circle, 3.0),
            force: ForceProfile::ConstantPayload {
                force_w: Vector3::new(0.0, 0.5, -1.0),
            },
            duration: 3.0,
            yaw: 0.0,
        };
        let noise = NoiseConfig {
            seed: 7,
            ..NoiseConfig::default()
        };
        let a = synthesize_sensors(&scenario, &VehicleParams::default(), &noise, &CameraConfig::default()).unwrap();
        let b = synthesize_sensors(&scenario, &VehicleParams::default(), &noise, &CameraConfig::default()).unwrap();
        assert_eq!(a, b);
        let other = NoiseConfig { seed: 8, ..noise };
        let c = synthesize_sensors(&scenario, &VehicleParams::default(), &other, &CameraConfig::default()).unwrap();
        assert_ne!(a.imu, c.imu);
    }

    #[test]
    fn noiseless_force_reconstruction_is_exact() {
        // f_ext = â − b_a − T̂ at every IMU tick that coincides with a rotor tick.
        let scenario = Scenario {
            trajectory: TrajectorySpec::default_for(TrajectoryKind::Lemniscate, 4.0),
            force: ForceProfile::ElasticRope {
                anchor: Vector3::new(0.0, 0.0, -1.0),
                stiffness: 1.5,
                rest_length: 1.5,
            },
            duration: 4.0,
            yaw: 0.2,
        };
        let vehicle = VehicleParams::default();
        let log = synthesize_sensors(&scenario, &vehicle, &NoiseConfig::noiseless(), &CameraConfig::default()).unwrap();
        let mut checked = 0;
        for r in &log.rotor {
            let imu = log.imu.iter().find(|s| (s.t - r.t).abs() < 1e-9).unwrap();
            let truth = log.truth_at(r.t, 1e-9).unwrap();
            let thrust = Vector3::new(0.0, 0.0, vehicle.thrust_from_speeds(&r.omega_rotor));
            let f = imu.accel - truth.b_a - thrust;
            assert!((f - truth.f_ext_b).norm() < 1e-9, "t = {}", r.t);
            checked += 1;
        }
        assert!(checked > 300);
    }

    #[test]
    fn accelerometer_matches_position_curvature() {
        let scenario = Scenario {
            trajectory: TrajectorySpec::default_for(TrajectoryKind::Circle, 2.0),
            force: ForceProfile::Zero,
            duration: 2.0,
            yaw: 0.0,
        };
        let log = synthesize_sensors(
            &scenario,
            &VehicleParams::default(),
            &NoiseConfig::noiseless(),
            &CameraConfig::default(),
        )
        .unwrap();
        // truth grid mixes IMU and camera instants, so pick uniform IMU-spaced triples.
        let dt = 1.0 / 400.0;
        for i in (10..700).step_by(37) {
            let t = i as f64 * dt;
            let p = |t: f64| log.truth_at(t, 1e-9).unwrap().p_w;
            let a_num = (p(t + dt) - 2.0 * p(t) + p(t - dt)) / (dt * dt);
            let truth = log.truth_at(t, 1e-9).unwrap();
            let a_imu = truth.q_wb.transform_vector(&log.imu[i].accel) + crate::geometry::gravity();
            assert!((a_num - a_imu).norm() < 1e-3, "t = {t}");
        }
    }

    #[test]
    fn sparse_landmark_field_is_rejected() {
        let camera = CameraConfig {
            landmark_count: 5,
            ..CameraConfig::default()
        };
        let err = synthesize_sensors(
            &hover_scenario(ForceProfile::Zero),
            &VehicleParams::default(),
            &NoiseConfig::noiseless(),
            &camera,
        );
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn frames_see_enough_landmarks() {
        let scenario = Scenario {
            trajectory: TrajectorySpec::default_for(TrajectoryKind::Lemniscate, 6.0),
            force: ForceProfile::Zero,
            duration: 6.0,
            yaw: 0.0,
        };
        let log = synthesize_sensors(
            &scenario,
            &VehicleParams::default(),
            &NoiseConfig::default(),
            &CameraConfig::default(),
        )
        .unwrap();
        let frames = log.frames();
        assert_eq!(frames.len(), 181);
        assert!(frames.iter().all(|(_, obs)| obs.len() >= 20 && obs.len() <= 60));
    }
}
