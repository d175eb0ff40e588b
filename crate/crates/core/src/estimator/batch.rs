use std::path::Path;
use std::time::Instant;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factors::{ForceIndex, MargPrior, NavState, StateVec, SBA, SBG, SF, SP, SQ, SV};
use crate::geometry::gravity;
use crate::preint::{fuse_streams, interval_nodes, DynPreintegration, ImuPreintegration, ProcessNoise};
use crate::sim::dataset::{fmt_f64, read_rows, write_rows};
use crate::sim::{GroundTruthSample, LandmarkObservation, NoiseConfig, SensorLog};

use super::{Mode, OptimizeReport, SlidingWindow, SolverConfig};

/// Bootstrap of the first keyframe from perturbed ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    /// Magnitudes of the perturbation applied to the first state's guess.
    pub perturb_p: f64,
    pub perturb_theta_deg: f64,
    pub perturb_v: f64,
    pub seed: u64,
    /// Gauge anchor on the first pose (centred at truth).
    pub anchor_sigma_p: f64,
    pub anchor_sigma_theta: f64,
    /// Weak priors on the remaining first-state quantities (centred at the guess).
    pub prior_sigma_v: f64,
    pub prior_sigma_ba: f64,
    pub prior_sigma_bg: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            perturb_p: 0.0,
            perturb_theta_deg: 0.0,
            perturb_v: 0.0,
            seed: 0,
            anchor_sigma_p: 1e-4,
            anchor_sigma_theta: 1e-4,
            prior_sigma_v: 0.5,
            prior_sigma_ba: 0.02,
            prior_sigma_bg: 0.002,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub solver: SolverConfig,
    pub init: InitConfig,
    /// Sensor noise assumed for weighting; rates are taken from the log.
    pub noise: NoiseConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateRecord {
    pub t: f64,
    pub state: NavState,
    /// Mean external force over `[t, t_next]` in the body frame at `t`;
    /// `None` where no dynamics factor constrains it.
    pub force: Option<Vector3<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeReport {
    pub t: f64,
    #[serde(flatten)]
    pub solve: OptimizeReport,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub force_index: ForceIndex,
    pub keyframes: usize,
    pub diverged: bool,
    /// Cost after the last solve.
    pub final_cost: f64,
    /// Largest post-solve cost over all keyframes.
    pub max_final_cost: f64,
    /// Wall-clock figures vary between runs, so they stay out of the report file.
    #[serde(skip)]
    pub timing: StageTiming,
    pub solves: Vec<KeyframeReport>,
}

/// Wall-clock seconds spent in each stage of a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub preintegration_s: f64,
    pub optimization_s: f64,
    pub marginalization_s: f64,
}

#[derive(Debug, Clone, Default)]
pub struct BatchOutput {
    pub records: Vec<EstimateRecord>,
    pub report: RunReport,
    pub runtime_s: f64,
}

fn truth_state(s: &GroundTruthSample) -> NavState {
    NavState {
        t: s.t,
        p: s.p_w,
        v: s.v_w,
        q: s.q_wb,
        ba: s.b_a,
        bg: s.b_w,
        f: s.f_ext_b,
    }
}

fn unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

fn bootstrap(truth: &NavState, init: &InitConfig) -> (NavState, MargPrior) {
    let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
    let guess = NavState {
        p: truth.p + unit(&mut rng) * init.perturb_p,
        q: truth.q * UnitQuaternion::from_scaled_axis(unit(&mut rng) * init.perturb_theta_deg.to_radians()),
        v: truth.v + unit(&mut rng) * init.perturb_v,
        ba: Vector3::zeros(),
        bg: Vector3::zeros(),
        f: Vector3::zeros(),
        ..*truth
    };
    let centre = NavState {
        p: truth.p,
        q: truth.q,
        ..guess
    };
    let mut sigmas = StateVec::zeros();
    sigmas.fixed_rows_mut::<3>(SP).fill(init.anchor_sigma_p);
    sigmas.fixed_rows_mut::<3>(SQ).fill(init.anchor_sigma_theta);
    sigmas.fixed_rows_mut::<3>(SV).fill(init.prior_sigma_v);
    sigmas.fixed_rows_mut::<3>(SBA).fill(init.prior_sigma_ba);
    sigmas.fixed_rows_mut::<3>(SBG).fill(init.prior_sigma_bg);
    sigmas.fixed_rows_mut::<3>(SF).fill(0.0);
    (guess, MargPrior::diagonal(centre, &sigmas))
}

/// IMU dead-reckoning of the next keyframe from the newest state.
fn predict(last: &NavState, imu: &ImuPreintegration, t: f64) -> NavState {
    let c = imu.correct_bias(&last.ba, &last.bg);
    let dt = imu.dt_total();
    let g = gravity();
    NavState {
        t,
        p: last.p + last.v * dt + 0.5 * g * dt * dt + last.q * c.dp,
        v: last.v + g * dt + last.q * c.dv,
        q: last.q * c.dq,
        ..*last
    }
}

fn looks_diverged(x: &NavState) -> bool {
    !x.is_finite() || x.v.norm() > 1e3 || x.p.norm() > 1e6
}

/// Runs the estimator over a log, one keyframe per camera frame.
pub fn run_batch(log: &SensorLog, config: &EstimatorConfig) -> Result<BatchOutput> {
    let started = Instant::now();
    config.solver.validate()?;
    log.validate()?;
    let mut report = RunReport {
        mode: config.solver.mode,
        force_index: config.solver.force_index,
        ..RunReport::default()
    };
    let fused = fuse_streams(&log.imu, &log.rotor, &log.meta.vehicle())?;
    let frames: Vec<(f64, Vec<LandmarkObservation>)> = match (fused.first(), fused.last()) {
        (Some(a), Some(b)) => log
            .frames()
            .into_iter()
            .filter(|(t, _)| *t >= a.t - 1e-9 && *t <= b.t + 1e-9)
            .collect(),
        _ => Vec::new(),
    };
    if frames.is_empty() {
        return Ok(BatchOutput {
            report,
            runtime_s: started.elapsed().as_secs_f64(),
            ..BatchOutput::default()
        });
    }

    let model = NoiseConfig {
        imu_hz: log.meta.noise.imu_hz,
        rmu_hz: log.meta.noise.rmu_hz,
        cam_hz: log.meta.noise.cam_hz,
        ..config.noise.clone()
    };
    let noise = ProcessNoise::from_config(&model);
    let sigma = log.meta.camera.normalized_sigma(model.sigma_px);
    if !(sigma > 0.0) {
        return Err(Error::invalid("estimator pixel sigma must be > 0"));
    }
    let weighted = |obs: &[LandmarkObservation]| -> Vec<LandmarkObservation> {
        obs.iter()
            .map(|o| LandmarkObservation {
                pixel_sigma: sigma,
                ..*o
            })
            .collect()
    };

    let (t0, obs0) = &frames[0];
    let truth0 = log
        .truth_at(*t0, 1e-6)
        .ok_or_else(|| Error::Validation(format!("no ground truth at the first keyframe t = {t0}")))?;
    let (guess, gauge) = bootstrap(&truth_state(truth0), &config.init);
    let mut window = SlidingWindow::new(config.solver.clone())?;
    window.init(NavState { t: *t0, ..guess }, &weighted(obs0))?;
    window.set_prior(gauge)?;

    let n = config.solver.window_size;
    let mut emitted: Vec<NavState> = Vec::new();
    for (t, obs) in frames.iter().skip(1) {
        let last = *window.states().last().expect("window is never empty");
        let clock = Instant::now();
        let nodes = interval_nodes(&fused, last.t, *t)?;
        let dyn_block = DynPreintegration::from_nodes(&nodes, last.ba, last.bg, noise)?;
        let imu_block = ImuPreintegration::from_nodes(&nodes, last.ba, last.bg, noise)?;
        report.timing.preintegration_s += clock.elapsed().as_secs_f64();
        let guess = predict(&last, &imu_block, *t);
        window.add_keyframe(guess, dyn_block, imu_block, &weighted(obs))?;
        let clock = Instant::now();
        let solve = window.optimize()?;
        report.timing.optimization_s += clock.elapsed().as_secs_f64();
        let diverged = solve.diverged || window.states().iter().any(looks_diverged);
        report.solves.push(KeyframeReport { t: *t, solve });
        if diverged {
            report.diverged = true;
            log::warn!("estimator diverged at t = {t:.3} s; stopping");
            break;
        }
        if window.len() == n + 1 {
            let clock = Instant::now();
            emitted.push(window.marginalize()?);
            report.timing.marginalization_s += clock.elapsed().as_secs_f64();
        }
    }
    if !report.diverged {
        emitted.extend_from_slice(window.states());
    }

    let mode = config.solver.mode;
    let records = (0..emitted.len())
        .map(|k| {
            let force = match (mode, config.solver.force_index) {
                (Mode::VioOnly, _) => None,
                (_, ForceIndex::Current) => (k + 1 < emitted.len()).then(|| emitted[k].f),
                (_, ForceIndex::Next) => emitted.get(k + 1).map(|x| x.f),
            };
            EstimateRecord {
                t: emitted[k].t,
                state: emitted[k],
                force,
            }
        })
        .collect::<Vec<_>>();
    report.keyframes = records.len();
    report.final_cost = report.solves.last().map(|s| s.solve.final_cost()).unwrap_or(0.0);
    report.max_final_cost = report.solves.iter().map(|s| s.solve.final_cost()).fold(0.0, f64::max);
    Ok(BatchOutput {
        records,
        report,
        runtime_s: started.elapsed().as_secs_f64(),
    })
}

pub const ESTIMATE_COLUMNS: [&str; 20] = [
    "t", "px", "py", "pz", "vx", "vy", "vz", "qw", "qx", "qy", "qz", "bax", "bay", "baz", "bgx", "bgy", "bgz", "fx",
    "fy", "fz",
];

pub fn write_estimate_csv(records: &[EstimateRecord], path: &Path) -> Result<()> {
    write_rows(
        path,
        &ESTIMATE_COLUMNS,
        records.iter().map(|r| {
            let x = &r.state;
            let f = r.force.unwrap_or(Vector3::repeat(f64::NAN));
            let q = x.q.quaternion();
            [
                r.t, x.p.x, x.p.y, x.p.z, x.v.x, x.v.y, x.v.z, q.w, q.i, q.j, q.k, x.ba.x, x.ba.y, x.ba.z, x.bg.x,
                x.bg.y, x.bg.z, f.x, f.y, f.z,
            ]
            .map(fmt_f64)
        }),
    )
}

pub fn read_estimate_csv(path: &Path) -> Result<Vec<EstimateRecord>> {
    if !path.exists() {
        return Err(Error::MissingFiles {
            dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            missing: vec![path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()],
        });
    }
    Ok(read_rows(path, &ESTIMATE_COLUMNS)?
        .into_iter()
        .map(|r| {
            let v3 = |i: usize| Vector3::new(r[i], r[i + 1], r[i + 2]);
            let f = v3(17);
            EstimateRecord {
                t: r[0],
                state: NavState {
                    t: r[0],
                    p: v3(1),
                    v: v3(4),
                    q: UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(r[7], r[8], r[9], r[10])),
                    ba: v3(11),
                    bg: v3(14),
                    f: if f.iter().all(|v| v.is_finite()) {
                        f
                    } else {
                        Vector3::zeros()
                    },
                },
                force: f.iter().all(|v| v.is_finite()).then_some(f),
            }
        })
        .collect())
}
