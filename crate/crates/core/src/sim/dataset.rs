//! On-disk dataset: `imu.csv`, `rotor.csv`, `cam.csv`, `truth.csv` and
//! `meta.json` in one directory.

use std::fs;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3, Vector4};

use crate::error::{Error, Result};

use super::{GroundTruthSample, ImuSample, LandmarkObservation, LogMeta, RotorSpeedSample, SensorLog};

pub const IMU_FILE: &str = "imu.csv";
pub const ROTOR_FILE: &str = "rotor.csv";
pub const CAM_FILE: &str = "cam.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const META_FILE: &str = "meta.json";

pub const DATASET_FILES: [&str; 5] = [IMU_FILE, ROTOR_FILE, CAM_FILE, TRUTH_FILE, META_FILE];

const IMU_COLS: [&str; 7] = ["t", "ax", "ay", "az", "gx", "gy", "gz"];
const ROTOR_COLS: [&str; 5] = ["t", "w1", "w2", "w3", "w4"];
const CAM_COLS: [&str; 4] = ["t", "landmark_id", "u", "v"];
const TRUTH_COLS: [&str; 20] = [
    "t", "px", "py", "pz", "vx", "vy", "vz", "qw", "qx", "qy", "qz", "fx", "fy", "fz", "bax", "bay", "baz", "bgx",
    "bgy", "bgz",
];

/// Nine significant digits, the precision of every float in the dataset.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else {
        format!("{x:.8e}")
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse {
        file: path.display().to_string(),
        line,
        msg: e.to_string(),
    }
}

pub(crate) fn write_rows<const N: usize>(
    path: &Path,
    header: &[&str; N],
    rows: impl Iterator<Item = [String; N]>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a CSV into rows of the requested columns (by header name, any order).
pub(crate) fn read_rows<const N: usize>(path: &Path, cols: &[&str; N]) -> Result<Vec<[f64; N]>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Parse {
                file: path.display().to_string(),
                line: 0,
                msg: e.to_string(),
            },
            _ => csv_error(path, e),
        })?;
    let headers = r.headers().map_err(|e| csv_error(path, e))?.clone();
    let mut idx = [0usize; N];
    for (k, col) in cols.iter().enumerate() {
        idx[k] = headers.iter().position(|h| h == *col).ok_or_else(|| Error::Parse {
            file: path.display().to_string(),
            line: 1,
            msg: format!("missing column '{col}'"),
        })?;
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let mut row = [0.0; N];
        for k in 0..N {
            let field = rec.get(idx[k]).unwrap_or("");
            row[k] = field.parse::<f64>().map_err(|_| Error::Parse {
                file: path.display().to_string(),
                line,
                msg: format!("column '{}': cannot parse '{field}' as a number", cols[k]),
            })?;
        }
        out.push(row);
    }
    Ok(out)
}

pub fn write_log(log: &SensorLog, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let f = fmt_f64;
    write_rows(
        &dir.join(IMU_FILE),
        &IMU_COLS,
        log.imu.iter().map(|s| {
            [
                f(s.t),
                f(s.accel.x),
                f(s.accel.y),
                f(s.accel.z),
                f(s.gyro.x),
                f(s.gyro.y),
                f(s.gyro.z),
            ]
        }),
    )?;
    write_rows(
        &dir.join(ROTOR_FILE),
        &ROTOR_COLS,
        log.rotor.iter().map(|s| {
            let w = &s.omega_rotor;
            [f(s.t), f(w[0]), f(w[1]), f(w[2]), f(w[3])]
        }),
    )?;
    write_rows(
        &dir.join(CAM_FILE),
        &CAM_COLS,
        log.cam
            .iter()
            .map(|o| [f(o.frame_t), o.landmark_id.to_string(), f(o.bearing.x), f(o.bearing.y)]),
    )?;
    write_rows(
        &dir.join(TRUTH_FILE),
        &TRUTH_COLS,
        log.truth.iter().map(|s| {
            let q = s.q_wb.quaternion();
            [
                f(s.t),
                f(s.p_w.x),
                f(s.p_w.y),
                f(s.p_w.z),
                f(s.v_w.x),
                f(s.v_w.y),
                f(s.v_w.z),
                f(q.w),
                f(q.i),
                f(q.j),
                f(q.k),
                f(s.f_ext_b.x),
                f(s.f_ext_b.y),
                f(s.f_ext_b.z),
                f(s.b_a.x),
                f(s.b_a.y),
                f(s.b_a.z),
                f(s.b_w.x),
                f(s.b_w.y),
                f(s.b_w.z),
            ]
        }),
    )?;
    let meta = serde_json::to_string_pretty(&log.meta)?;
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, meta + "\n").map_err(|e| Error::io(meta_path, e))
}

/// Lists the dataset files absent from `dir`.
pub fn missing_files(dir: &Path) -> Vec<String> {
    DATASET_FILES
        .iter()
        .filter(|f| !dir.join(f).is_file())
        .map(|f| f.to_string())
        .collect()
}

pub fn read_log(dir: &Path) -> Result<SensorLog> {
    let missing = missing_files(dir);
    if !missing.is_empty() {
        return Err(Error::MissingFiles {
            dir: dir.to_path_buf(),
            missing,
        });
    }
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: LogMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: meta_path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let v3 = |a: f64, b: f64, c: f64| Vector3::new(a, b, c);

    let imu = read_rows(&dir.join(IMU_FILE), &IMU_COLS)?
        .into_iter()
        .map(|r| ImuSample {
            t: r[0],
            accel: v3(r[1], r[2], r[3]),
            gyro: v3(r[4], r[5], r[6]),
        })
        .collect();
    let rotor = read_rows(&dir.join(ROTOR_FILE), &ROTOR_COLS)?
        .into_iter()
        .map(|r| RotorSpeedSample {
            t: r[0],
            omega_rotor: Vector4::new(r[1], r[2], r[3], r[4]),
        })
        .collect();
    let sigma = meta.camera.normalized_sigma(meta.noise.sigma_px);
    let cam_path = dir.join(CAM_FILE);
    let cam = read_rows(&cam_path, &CAM_COLS)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            if r[1] < 0.0 || r[1].fract() != 0.0 || r[1] > u32::MAX as f64 {
                return Err(Error::Parse {
                    file: cam_path.display().to_string(),
                    line: i + 2,
                    msg: format!("landmark_id {} is not a non-negative integer", r[1]),
                });
            }
            Ok(LandmarkObservation {
                frame_t: r[0],
                landmark_id: r[1] as u32,
                bearing: Vector2::new(r[2], r[3]),
                pixel_sigma: sigma,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let truth = read_rows(&dir.join(TRUTH_FILE), &TRUTH_COLS)?
        .into_iter()
        .map(|r| GroundTruthSample {
            t: r[0],
            p_w: v3(r[1], r[2], r[3]),
            v_w: v3(r[4], r[5], r[6]),
            q_wb: UnitQuaternion::from_quaternion(Quaternion::new(r[7], r[8], r[9], r[10])),
            f_ext_b: v3(r[11], r[12], r[13]),
            b_a: v3(r[14], r[15], r[16]),
            b_w: v3(r[17], r[18], r[19]),
        })
        .collect();
    let log = SensorLog {
        meta,
        imu,
        rotor,
        cam,
        truth,
    };
    log.validate()?;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{
        synthesize_sensors, CameraConfig, ForceProfile, NoiseConfig, Scenario, TrajectoryKind, TrajectorySpec,
        VehicleParams,
    };

    fn small_log() -> SensorLog {
        let scenario = Scenario {
            trajectory: TrajectorySpec::default_for(TrajectoryKind::Circle, 1.0),
            force: ForceProfile::ConstantPayload {
                force_w: Vector3::new(0.1, 0.0, -1.0),
            },
            duration: 1.0,
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

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-8 * a.abs().max(b.abs()) + 1e-300
    }

    #[test]
    fn roundtrip_preserves_every_field() {
        let log = small_log();
        let dir = tempfile::tempdir().unwrap();
        write_log(&log, dir.path()).unwrap();
        let back = read_log(dir.path()).unwrap();
        assert_eq!(back.meta, log.meta);
        assert_eq!(back.imu.len(), log.imu.len());
        assert_eq!(back.cam.len(), log.cam.len());
        assert_eq!(back.truth.len(), log.truth.len());
        for (a, b) in log.imu.iter().zip(&back.imu) {
            assert!(close(a.t, b.t));
            assert!(a.accel.iter().zip(b.accel.iter()).all(|(x, y)| close(*x, *y)));
            assert!(a.gyro.iter().zip(b.gyro.iter()).all(|(x, y)| close(*x, *y)));
        }
        for (a, b) in log.cam.iter().zip(&back.cam) {
            assert_eq!(a.landmark_id, b.landmark_id);
            assert!(close(a.bearing.x, b.bearing.x) && close(a.bearing.y, b.bearing.y));
            assert_eq!(a.pixel_sigma, b.pixel_sigma);
        }
        for (a, b) in log.truth.iter().zip(&back.truth) {
            assert!((a.q_wb.coords - b.q_wb.coords).norm() < 1e-8);
            assert!((a.p_w - b.p_w).norm() < 1e-7);
        }
        // A second round trip is exact: the text form is a fixed point.
        let dir2 = tempfile::tempdir().unwrap();
        write_log(&back, dir2.path()).unwrap();
        assert_eq!(read_log(dir2.path()).unwrap(), back);
        for f in DATASET_FILES {
            assert_eq!(
                fs::read(dir.path().join(f)).unwrap(),
                fs::read(dir2.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn missing_column_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_log(&small_log(), dir.path()).unwrap();
        fs::write(dir.path().join(IMU_FILE), "t,ax,ay,az,gx,gy\n0,0,0,9.79,0,0\n").unwrap();
        match read_log(dir.path()) {
            Err(Error::Parse { msg, line, .. }) => {
                assert!(msg.contains("gz"), "{msg}");
                assert_eq!(line, 1);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_number_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        write_log(&small_log(), dir.path()).unwrap();
        fs::write(dir.path().join(ROTOR_FILE), "t,w1,w2,w3,w4\n0,1,1,1,1\n0.01,1,x,1,1\n").unwrap();
        match read_log(dir.path()) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("w2"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_order_timestamps_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_log(&small_log(), dir.path()).unwrap();
        fs::write(
            dir.path().join(ROTOR_FILE),
            "t,w1,w2,w3,w4\n0.02,1,1,1,1\n0.01,1,1,1,1\n",
        )
        .unwrap();
        assert!(matches!(read_log(dir.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn missing_files_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        write_log(&small_log(), dir.path()).unwrap();
        fs::remove_file(dir.path().join(CAM_FILE)).unwrap();
        fs::remove_file(dir.path().join(META_FILE)).unwrap();
        match read_log(dir.path()) {
            Err(Error::MissingFiles { missing, .. }) => {
                assert_eq!(missing, vec![CAM_FILE.to_string(), META_FILE.to_string()])
            }
            other => panic!("expected missing files, got {other:?}"),
        }
    }

    #[test]
    fn nine_significant_digits() {
        assert_eq!(fmt_f64(1.0 / 3.0), "3.33333333e-1");
        assert_eq!(fmt_f64(9.79), "9.79000000e0");
        assert_eq!("3.33333333e-1".parse::<f64>().unwrap(), 0.333333333);
    }
}
