use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use vid_core::estimator::{read_estimate_csv, run_batch, write_estimate_csv, EstimatorConfig, Mode, StageTiming};
use vid_core::eval::{evaluate, MetricsReport};
use vid_core::identify::{identify_log, HoverThresholds, RlsState};
use vid_core::sim::dataset::TRUTH_FILE;
use vid_core::sim::{read_log, synthesize_sensors, write_log};

use crate::config::ExperimentConfig;
use crate::CliError;

pub const ESTIMATE_FILE: &str = "estimate.csv";
pub const REPORT_FILE: &str = "report.json";
pub const TIMING_FILE: &str = "timing.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const COEFFS_FILE: &str = "coeffs.json";
pub const CONFIG_FILE: &str = "config.toml";

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| {
        CliError::Core(vid_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(vid_core::Error::from)?;
    write_text(path, &(text + "\n"))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| {
        CliError::Core(vid_core::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })
}

pub fn simulate(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let log = synthesize_sensors(&cfg.scenario, &cfg.vehicle, &cfg.sim_noise(), &cfg.camera)?;
    write_log(&log, out)?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_toml())?;
    log::info!(
        "simulated {:.1} s: {} imu, {} rotor, {} landmark observations -> {}",
        cfg.scenario.duration,
        log.imu.len(),
        log.rotor.len(),
        log.cam.len(),
        out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct Coeffs {
    tau: [f64; 4],
    residual_rms: f64,
    n_samples: usize,
}

pub fn identify(dataset: &Path, out: &Path) -> Result<(), CliError> {
    let log = read_log(dataset)?;
    let r = identify_log(&log, &HoverThresholds::default(), &RlsState::default())?;
    if r.n_samples == 0 {
        log::warn!("no hover segment found; coefficients are the initial guess");
    }
    create_dir(out)?;
    write_json(
        &out.join(COEFFS_FILE),
        &Coeffs {
            tau: r.tau,
            residual_rms: r.residual_rms,
            n_samples: r.n_samples,
        },
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub total_s: f64,
    #[serde(flatten)]
    pub stages: StageTiming,
}

pub struct RunOutcome {
    pub diverged: bool,
    pub timing: Timing,
}

pub fn estimator_config(cfg: &ExperimentConfig) -> EstimatorConfig {
    EstimatorConfig {
        solver: cfg.solver.clone(),
        init: cfg.init.clone(),
        noise: cfg.model_noise.clone(),
    }
}

/// Runs the estimator and writes estimate, report and timing into `out`.
pub fn run(dataset: &Path, cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome, CliError> {
    let started = Instant::now();
    let log = read_log(dataset)?;
    let result = run_batch(&log, &estimator_config(cfg))?;
    create_dir(out)?;
    write_estimate_csv(&result.records, &out.join(ESTIMATE_FILE))?;
    write_json(&out.join(REPORT_FILE), &result.report)?;
    let timing = Timing {
        total_s: started.elapsed().as_secs_f64(),
        stages: result.report.timing,
    };
    write_json(&out.join(TIMING_FILE), &timing)?;
    log::info!(
        "{} keyframes in {:.2} s, final cost {:.3e}",
        result.report.keyframes,
        timing.total_s,
        result.report.final_cost
    );
    Ok(RunOutcome {
        diverged: result.report.diverged,
        timing,
    })
}

/// Metrics of an estimate file against a dataset's ground truth. The
/// divergence flag is taken from a `report.json` next to the estimate.
pub fn eval(estimate: &Path, dataset: &Path) -> Result<MetricsReport, CliError> {
    let records = read_estimate_csv(estimate)?;
    let log = read_truth(dataset)?;
    let mut m = evaluate(&records, &log.truth, Some(log.meta.mass))?;
    let report = estimate.with_file_name(REPORT_FILE);
    if let Ok(text) = fs::read_to_string(&report) {
        let v: serde_json::Value = serde_json::from_str(&text).map_err(vid_core::Error::from)?;
        m.diverged = v.get("diverged").and_then(serde_json::Value::as_bool).unwrap_or(false);
    }
    Ok(m)
}

fn read_truth(dataset: &Path) -> Result<vid_core::sim::SensorLog, CliError> {
    if !dataset.join(TRUTH_FILE).is_file() {
        return Err(CliError::Core(vid_core::Error::MissingFiles {
            dir: dataset.to_path_buf(),
            missing: vec![TRUTH_FILE.to_string()],
        }));
    }
    Ok(read_log(dataset)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub label: String,
    pub mode: Mode,
    /// `ok`, `diverged` or `failed`.
    pub status: String,
    pub metrics: Option<MetricsReport>,
    pub runtime_s: Option<f64>,
    pub error: Option<String>,
}

/// One run per configuration into `out/<label>`, then a CSV and markdown table.
pub fn compare(dataset: &Path, runs: &[(String, ExperimentConfig)], out: &Path) -> Result<Vec<CompareRow>, CliError> {
    if runs.len() < 2 {
        return Err(CliError::Usage("compare needs at least two configurations".into()));
    }
    let mut labels: Vec<&str> = runs.iter().map(|(l, _)| l.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() != runs.len() {
        return Err(CliError::Usage("compare labels must be distinct".into()));
    }
    create_dir(out)?;
    let rows: Vec<CompareRow> = std::thread::scope(|scope| {
        let handles: Vec<_> = runs
            .iter()
            .map(|(label, cfg)| {
                let dir: PathBuf = out.join(label);
                scope.spawn(move || {
                    let outcome =
                        run(dataset, cfg, &dir).and_then(|o| Ok((o, eval(&dir.join(ESTIMATE_FILE), dataset)?)));
                    match outcome {
                        Ok((o, mut m)) => {
                            m.diverged = o.diverged;
                            m.runtime_s = Some(o.timing.total_s);
                            CompareRow {
                                label: label.clone(),
                                mode: cfg.solver.mode,
                                status: if o.diverged { "diverged" } else { "ok" }.into(),
                                runtime_s: Some(o.timing.total_s),
                                metrics: Some(m),
                                error: None,
                            }
                        }
                        Err(e) => {
                            log::error!("{label}: {e}");
                            CompareRow {
                                label: label.clone(),
                                mode: cfg.solver.mode,
                                status: "failed".into(),
                                metrics: None,
                                runtime_s: None,
                                error: Some(e.to_string()),
                            }
                        }
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("run thread panicked"))
            .collect()
    });
    write_text(&out.join("compare.csv"), &compare_csv(&rows))?;
    write_text(&out.join("compare.md"), &compare_markdown(&rows))?;
    Ok(rows)
}

const COMPARE_HEADER: [&str; 9] = [
    "label",
    "mode",
    "status",
    "trans_rmse_m",
    "rot_rmse_deg",
    "force_norm_rmse",
    "force_vector_rmse",
    "runtime_s",
    "error",
];

fn compare_cells(r: &CompareRow) -> Vec<String> {
    let num = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
    let m = r.metrics.as_ref();
    vec![
        r.label.clone(),
        r.mode.to_string(),
        r.status.clone(),
        num(m.map(|m| m.trans_rmse_m)),
        num(m.map(|m| m.rot_rmse_deg)),
        num(m.and_then(|m| m.force).map(|f| f.norm)),
        num(m.and_then(|m| m.force).map(|f| f.vector)),
        r.runtime_s.map(|v| format!("{v:.2}")).unwrap_or_default(),
        r.error.clone().unwrap_or_default(),
    ]
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COMPARE_HEADER).expect("in-memory write");
    for r in rows {
        w.write_record(compare_cells(r)).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
}

pub fn compare_markdown(rows: &[CompareRow]) -> String {
    let mut s = format!(
        "| {} |\n|{}\n",
        COMPARE_HEADER.join(" | "),
        "---|".repeat(COMPARE_HEADER.len())
    );
    for r in rows {
        let cells: Vec<String> = compare_cells(r).into_iter().map(|c| c.replace('|', "\\|")).collect();
        s.push_str(&format!("| {} |\n", cells.join(" | ")));
    }
    s
}
