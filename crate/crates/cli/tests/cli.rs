use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn vid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vid"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = vid(args);
    assert!(
        out.status.success(),
        "vid {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|x| x.unwrap().iter().map(String::from).collect())
        .collect()
}

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files
        .into_iter()
        .map(|f| (f.file_name().unwrap().into(), fs::read(&f).unwrap()))
        .collect()
}

#[test]
fn simulate_is_deterministic_under_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    for d in [&a, &b] {
        ok(&[
            "simulate",
            "--out",
            p(d),
            "--preset",
            "payload",
            "--duration",
            "3",
            "--seed",
            "1",
        ]);
    }
    ok(&[
        "simulate",
        "--out",
        p(&c),
        "--preset",
        "payload",
        "--duration",
        "3",
        "--seed",
        "2",
    ]);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    assert_ne!(
        fs::read(a.join("imu.csv")).unwrap(),
        fs::read(c.join("imu.csv")).unwrap()
    );
}

#[test]
fn infeasible_trajectory_names_the_constraint() {
    let tmp = tempfile::tempdir().unwrap();
    let out = vid(&[
        "simulate",
        "--out",
        p(&tmp.path().join("d")),
        "--preset",
        "payload",
        "--duration",
        "2",
        "--force_w",
        "[0.0, 0.0, 12.0]",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("infeasible") && msg.contains("thrust"), "{msg}");
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    assert_eq!(vid(&["simulate"]).status.code(), Some(1));
    assert_eq!(
        vid(&["simulate", "--out", p(&d), "--nonsense", "1"]).status.code(),
        Some(1)
    );
    assert_eq!(vid(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(vid(&["--help"]).status.code(), Some(0));
    let missing = vid(&["run", p(&d), "--out", p(&tmp.path().join("r"))]);
    assert_eq!(missing.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&missing.stderr);
    assert!(msg.contains("imu.csv") && msg.contains("truth.csv"), "{msg}");
}

#[test]
fn rope_force_is_nonzero_exactly_when_taut() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("rope");
    ok(&["simulate", "--out", p(&d), "--preset", "rope", "--duration", "10"]);
    let (mut taut, mut slack) = (0, 0);
    for row in csv_rows(&d.join("truth.csv")) {
        let v: Vec<f64> = row.iter().map(|c| c.parse().unwrap()).collect();
        let len = (v[1] * v[1] + v[2] * v[2] + v[3] * v[3]).sqrt();
        let force = (v[11] * v[11] + v[12] * v[12] + v[13] * v[13]).sqrt();
        if len > 2.4 + 1e-6 {
            assert!(force > 0.0, "taut at t = {} but no force", v[0]);
            taut += 1;
        } else if len < 2.4 - 1e-6 {
            assert_eq!(force, 0.0, "slack at t = {}", v[0]);
            slack += 1;
        }
    }
    assert!(taut > 100 && slack > 100, "taut {taut}, slack {slack}");
}

#[test]
fn run_eval_and_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("hover");
    ok(&[
        "simulate",
        "--out",
        p(&d),
        "--preset",
        "hover",
        "--duration",
        "2",
        "--noise.sigma_px",
        "0.5",
    ]);

    // Force columns are NaN without dynamics factors.
    let r = tmp.path().join("vio");
    ok(&["run", p(&d), "--out", p(&r), "--mode", "vio_only"]);
    let rows = csv_rows(&r.join("estimate.csv"));
    assert!(rows.len() > 50);
    assert!(rows.iter().all(|row| row[17..20].iter().all(|c| c == "nan")));
    for f in ["estimate.csv", "report.json", "timing.json"] {
        assert!(r.join(f).is_file(), "{f}");
    }

    // Same dataset and config give identical outputs.
    let r2 = tmp.path().join("vio2");
    ok(&["run", p(&d), "--out", p(&r2), "--mode", "vio_only"]);
    for f in ["estimate.csv", "report.json"] {
        assert_eq!(fs::read(r.join(f)).unwrap(), fs::read(r2.join(f)).unwrap(), "{f}");
    }

    let out = ok(&["eval", p(&r.join("estimate.csv")), p(&d)]);
    let m: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(m["trans_rmse_m"].as_f64().unwrap() < 0.05);
    assert!(m["force"].is_null());
    assert_eq!(m["diverged"], false);
    assert!(r.join("metrics.json").is_file());

    let c = tmp.path().join("cmp");
    let out = ok(&["compare", p(&d), "--out", p(&c), "--modes", "proposed,vio_only"]);
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("| proposed | proposed | ok |"), "{table}");
    let rows = csv_rows(&c.join("compare.csv"));
    assert_eq!(rows.len(), 2);
    let trans: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    // Zero-force data: the two modes agree closely.
    assert!((trans[0] - trans[1]).abs() <= 0.1 * trans[1].max(1e-3), "{trans:?}");
    assert!(c.join("compare.md").is_file() && c.join("proposed/estimate.csv").is_file());

    let single = vid(&["compare", p(&d), "--out", p(&c), "--modes", "proposed"]);
    assert_eq!(single.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&single.stderr).contains("at least two"));
}

#[test]
fn noiseless_hover_reaches_zero_cost() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("hover");
    ok(&[
        "simulate",
        "--out",
        p(&d),
        "--preset",
        "hover",
        "--duration",
        "2",
        "--noise.sigma_a",
        "0",
        "--noise.sigma_w",
        "0",
        "--noise.sigma_t",
        "0",
        "--noise.sigma_ba",
        "0",
        "--noise.sigma_bw",
        "0",
        "--noise.sigma_px",
        "0",
    ]);
    let r = tmp.path().join("run");
    ok(&[
        "run",
        p(&d),
        "--out",
        p(&r),
        "--perturb_p",
        "0",
        "--perturb_theta_deg",
        "0",
        "--perturb_v",
        "0",
    ]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(r.join("report.json")).unwrap()).unwrap();
    let cost = report["final_cost"].as_f64().unwrap();
    assert!(cost < 1e-8, "final cost {cost}");
}

#[test]
fn divergence_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("payload");
    ok(&["simulate", "--out", p(&d), "--preset", "payload", "--duration", "6"]);
    let r = tmp.path().join("run");
    let out = vid(&[
        "run",
        p(&d),
        "--out",
        p(&r),
        "--mode",
        "vimo_mode",
        "--vimo_force_sigma",
        "0.001",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(r.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["diverged"], true);
}

#[test]
fn identify_writes_coefficients() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("hover");
    ok(&["simulate", "--out", p(&d), "--preset", "hover", "--duration", "4"]);
    ok(&["identify", p(&d), "--out", p(tmp.path())]);
    let c: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("coeffs.json")).unwrap()).unwrap();
    let tau: Vec<f64> = c["tau"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    let truth = [1.20e-5, 1.22e-5, 1.18e-5, 1.21e-5];
    for (t, e) in truth.iter().zip(&tau) {
        assert!(((e - t) / t).abs() < 0.02, "{tau:?}");
    }
    assert!(c["n_samples"].as_u64().unwrap() > 300);
    assert!(c["residual_rms"].as_f64().unwrap() >= 0.0);
}
