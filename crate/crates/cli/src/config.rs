//! Experiment configuration: TOML file with sections, overridable by
//! `--key value` pairs on the command line.

use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};
use vid_core::estimator::{InitConfig, SolverConfig};
use vid_core::sim::{CameraConfig, ForceProfile, NoiseConfig, Scenario, TrajectoryKind, TrajectorySpec, VehicleParams};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds the sensor noise and the landmark field.
    pub seed: u64,
    pub scenario: Scenario,
    #[serde(default)]
    pub vehicle: VehicleParams,
    #[serde(default)]
    pub camera: CameraConfig,
    /// Noise used to synthesize a dataset (`simulate`).
    #[serde(default)]
    pub noise: NoiseConfig,
    /// Noise assumed by the estimator for weighting (`run`); rates come from the dataset.
    #[serde(default)]
    pub model_noise: NoiseConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub init: InitConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            scenario: Preset::Circle.scenario(30.0),
            vehicle: VehicleParams::default(),
            camera: CameraConfig::default(),
            noise: NoiseConfig::default(),
            model_noise: NoiseConfig::default(),
            solver: SolverConfig::default(),
            init: InitConfig {
                perturb_p: 0.1,
                perturb_theta_deg: 2.0,
                perturb_v: 0.1,
                ..InitConfig::default()
            },
        }
    }
}

/// Named scenarios used by the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Hover,
    Circle,
    /// Circle on an elastic rope tied below the orbit; slack for part of each lap.
    Rope,
    /// Circle carrying a constant 2 m/s² downward payload.
    Payload,
    /// Hover hit by a lateral gust.
    Gust,
}

impl Preset {
    pub fn scenario(self, duration: f64) -> Scenario {
        let circle = TrajectorySpec::default_for(TrajectoryKind::Circle, duration);
        let (trajectory, force) = match self {
            Self::Hover => (
                TrajectorySpec::default_for(TrajectoryKind::Hover, duration),
                ForceProfile::Zero,
            ),
            Self::Circle => (circle, ForceProfile::Zero),
            Self::Rope => (
                TrajectorySpec::Circle {
                    center: Vector3::new(0.0, 0.0, 1.5),
                    radius: 2.0,
                    period: 10.0,
                    vertical_amplitude: 0.3,
                },
                ForceProfile::ElasticRope {
                    anchor: Vector3::zeros(),
                    stiffness: 3.0,
                    rest_length: 2.4,
                },
            ),
            Self::Payload => (
                circle,
                ForceProfile::ConstantPayload {
                    force_w: Vector3::new(0.0, 0.0, -2.0),
                },
            ),
            Self::Gust => (
                TrajectorySpec::default_for(TrajectoryKind::Hover, duration),
                ForceProfile::WindGust {
                    direction: Vector3::new(1.0, 0.0, 0.0),
                    magnitude: 1.5,
                    start: 0.3 * duration,
                    stop: 0.6 * duration,
                    ramp: 0.25,
                },
            ),
        };
        Scenario {
            trajectory,
            force,
            duration,
            yaw: 0.0,
        }
    }
}

impl ExperimentConfig {
    /// Defaults, then the preset, then the file, then the overrides.
    pub fn load(file: Option<&Path>, preset: Option<Preset>, overrides: &[String]) -> Result<Self, CliError> {
        let pairs = parse_overrides(overrides)?;
        let duration_override = pairs
            .iter()
            .find(|(k, _)| k == "scenario.duration" || k == "duration")
            .map(|(_, v)| parse_value(v))
            .and_then(|v| v.as_float().or_else(|| v.as_integer().map(|i| i as f64)));
        let mut base = Self::default();
        if let Some(p) = preset {
            base.scenario = p.scenario(duration_override.unwrap_or(base.scenario.duration));
        }
        let mut table = to_table(&base)?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            let file_table: Table = text
                .parse()
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            merge(&mut table, file_table);
        }
        // A new trajectory or force kind starts from that kind's defaults;
        // field overrides are applied afterwards.
        let duration = duration_override
            .or_else(|| table["scenario"]["duration"].as_float())
            .unwrap_or(30.0);
        let kind_key = |k: &str| match k {
            "scenario.trajectory.kind" | "trajectory.kind" => Some(true),
            "scenario.force.kind" | "force.kind" => Some(false),
            _ => None,
        };
        for (key, raw) in &pairs {
            match kind_key(key) {
                Some(true) => {
                    let kind = TrajectoryKind::from_str(raw).map_err(|e| CliError::Usage(e.to_string()))?;
                    let spec = TrajectorySpec::default_for(kind, duration);
                    table["scenario"].as_table_mut().expect("scenario table")["trajectory"] = to_value(&spec)?;
                }
                Some(false) => {
                    let profile = default_force(raw, duration)?;
                    table["scenario"].as_table_mut().expect("scenario table")["force"] = to_value(&profile)?;
                }
                None => {}
            }
        }
        for (key, raw) in &pairs {
            if kind_key(key).is_some() {
                continue;
            }
            let key = resolve_key(&table, key)?;
            set_path(&mut table, &key, parse_value(raw))?;
        }
        let cfg: Self = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: vid_core::Error| CliError::Usage(e.to_string());
        self.scenario.validate().map_err(usage)?;
        self.vehicle.validate().map_err(usage)?;
        self.noise.validate().map_err(usage)?;
        self.model_noise.validate().map_err(usage)?;
        self.solver.validate().map_err(usage)
    }

    /// Simulation noise with the experiment seed applied.
    pub fn sim_noise(&self) -> NoiseConfig {
        NoiseConfig {
            seed: self.seed,
            ..self.noise.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn default_force(kind: &str, duration: f64) -> Result<ForceProfile, CliError> {
    let pick = |p: Preset| p.scenario(duration).force;
    match kind.trim() {
        "zero" => Ok(ForceProfile::Zero),
        "constant_payload" => Ok(pick(Preset::Payload)),
        "elastic_rope" => Ok(pick(Preset::Rope)),
        "wind_gust" => Ok(pick(Preset::Gust)),
        other => Err(CliError::Usage(format!(
            "unknown force kind '{other}' (expected zero, constant_payload, elastic_rope or wind_gust)"
        ))),
    }
}

fn to_value<T: Serialize>(x: &T) -> Result<Value, CliError> {
    Value::try_from(x).map_err(|e| CliError::Usage(format!("config: {e}")))
}

fn to_table<T: Serialize>(x: &T) -> Result<Table, CliError> {
    match to_value(x)? {
        Value::Table(t) => Ok(t),
        _ => unreachable!("structs serialize to tables"),
    }
}

/// Recursive merge; tagged enums (tables with `kind`) are replaced whole
/// when the kind changes.
fn merge(dst: &mut Table, src: Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(Value::Table(d)), Value::Table(s))
                if d.get("kind").is_none() || d.get("kind") == s.get("kind") || s.get("kind").is_none() =>
            {
                merge(d, s)
            }
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(key) = a.strip_prefix("--") else {
            return Err(CliError::Usage(format!(
                "unexpected argument '{a}'; overrides take the form --key value"
            )));
        };
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.replace('-', "_"), v.to_string()));
            continue;
        }
        let v = it
            .next()
            .ok_or_else(|| CliError::Usage(format!("override --{key} needs a value")))?;
        out.push((key.replace('-', "_"), v.clone()));
    }
    Ok(out)
}

/// TOML literal when it parses as one (numbers, booleans, arrays), else a string.
fn parse_value(raw: &str) -> Value {
    format!("x = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("x"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn leaf_paths(t: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in t {
        let p = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(sub) => leaf_paths(sub, &p, out),
            _ => out.push(p),
        }
    }
}

/// Dotted paths are taken as given; a bare or partial key must name exactly
/// one leaf by suffix.
fn resolve_key(table: &Table, key: &str) -> Result<String, CliError> {
    let mut leaves = Vec::new();
    leaf_paths(table, "", &mut leaves);
    if leaves.iter().any(|l| l == key) {
        return Ok(key.to_string());
    }
    let suffix = format!(".{key}");
    let hits: Vec<&String> = leaves.iter().filter(|l| l.ends_with(&suffix)).collect();
    match hits.as_slice() {
        [one] => Ok((*one).clone()),
        [] => Err(CliError::Usage(format!("unknown config key '{key}'"))),
        many => Err(CliError::Usage(format!(
            "ambiguous config key '{key}': {}",
            many.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        ))),
    }
}

fn set_path(table: &mut Table, path: &str, v: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = path.split('.').collect();
    let (last, dirs) = parts.split_last().expect("non-empty path");
    let mut cur = table;
    for d in dirs {
        cur = cur
            .get_mut(*d)
            .and_then(Value::as_table_mut)
            .ok_or_else(|| CliError::Usage(format!("unknown config key '{path}'")))?;
    }
    // Integers written where a float is expected are promoted.
    let v = match (cur.get(*last), v) {
        (Some(Value::Float(_)), Value::Integer(i)) => Value::Float(i as f64),
        (_, v) => v,
    };
    cur.insert(last.to_string(), v);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use vid_core::estimator::Mode;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::load(None, None, &[]).unwrap();
        assert_eq!(c, ExperimentConfig::default());
        let back: ExperimentConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn bare_and_dotted_overrides() {
        let c = ExperimentConfig::load(
            None,
            Some(Preset::Payload),
            &args("--mode vimo_mode --noise.sigma_px 2 --model_noise.sigma_px=0.5 --seed 7 --duration 12"),
        )
        .unwrap();
        assert_eq!(c.solver.mode, Mode::VimoMode);
        assert_eq!(c.noise.sigma_px, 2.0);
        assert_eq!(c.model_noise.sigma_px, 0.5);
        assert_eq!(c.seed, 7);
        assert_eq!(c.scenario.duration, 12.0);
        assert!(matches!(c.scenario.force, ForceProfile::ConstantPayload { .. }));
    }

    #[test]
    fn kind_override_starts_from_kind_defaults() {
        let c = ExperimentConfig::load(None, None, &args("--scenario.force.kind elastic_rope --stiffness 5")).unwrap();
        match c.scenario.force {
            ForceProfile::ElasticRope { stiffness, .. } => assert_eq!(stiffness, 5.0),
            other => panic!("{other:?}"),
        }
        let c = ExperimentConfig::load(None, Some(Preset::Rope), &args("--scenario.trajectory.kind hover")).unwrap();
        assert!(matches!(c.scenario.trajectory, TrajectorySpec::Hover { .. }));
    }

    #[test]
    fn bad_overrides_are_usage_errors() {
        for bad in [
            "--nonsense 1",
            "--sigma_px 1",
            "--seed",
            "stray",
            "--mode sideways",
            "--window_size 1",
        ] {
            assert!(
                matches!(ExperimentConfig::load(None, None, &args(bad)), Err(CliError::Usage(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(
            &path,
            "seed = 3\n[scenario]\nduration = 5.0\n[scenario.force]\nkind = \"constant_payload\"\nforce_w = [0.0, 0.0, -1.0]\n[solver]\nwindow_size = 6\n",
        )
        .unwrap();
        let c = ExperimentConfig::load(Some(&path), None, &args("--window_size 8")).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.scenario.duration, 5.0);
        assert_eq!(c.solver.window_size, 8);
        assert_eq!(
            c.scenario.force,
            ForceProfile::ConstantPayload {
                force_w: Vector3::new(0.0, 0.0, -1.0)
            }
        );
    }
}
