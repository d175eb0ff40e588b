//! `vid`: simulate datasets, identify thrust coefficients, run the
//! estimator and score it against ground truth.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vid_core::estimator::Mode;

use config::{ExperimentConfig, Preset};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] vid_core::Error),
    #[error("estimator diverged")]
    Diverged,
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Diverged => 2,
            _ => 1,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "vid",
    version,
    about = "Visual-inertial-dynamics state and external force estimation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration shared by the commands that build an experiment.
#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Named scenario applied before the configuration file.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
    /// Overrides as `--key value` (`--solver.mode vimo_mode`, `--sigma_px 0.5`, ...).
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        ExperimentConfig::load(self.config.as_deref(), self.preset, &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset (sensor streams, ground truth and meta.json).
    Simulate {
        #[arg(long, short)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Identify per-rotor thrust coefficients from the hover segments of a dataset.
    Identify {
        dataset: PathBuf,
        #[arg(long, short, default_value = ".")]
        out: PathBuf,
    },
    /// Run the estimator; writes estimate.csv, report.json and timing.json.
    Run {
        dataset: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score an estimate against a dataset's ground truth.
    Eval {
        estimate: PathBuf,
        dataset: PathBuf,
        /// Write metrics here instead of next to the estimate.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Run several configurations on one dataset and tabulate their metrics.
    Compare {
        dataset: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Estimator modes to run with the shared configuration.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<Mode>,
        /// Additional configuration files, one run each.
        #[arg(long = "with", value_name = "CONFIG")]
        with: Vec<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Writes to stdout; a closed pipe (`vid eval ... | head`) is not an error.
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<(), CliError> {
    emit(&(serde_json::to_string_pretty(v).map_err(vid_core::Error::from)? + "\n"));
    Ok(())
}

fn label_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "config".into())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { out, cfg } => {
            let c = cfg.load()?;
            if cfg.print_config {
                emit(&c.to_toml());
                return Ok(());
            }
            commands::simulate(&c, &out)
        }
        Command::Identify { dataset, out } => commands::identify(&dataset, &out),
        Command::Run { dataset, out, cfg } => {
            let c = cfg.load()?;
            if cfg.print_config {
                emit(&c.to_toml());
                return Ok(());
            }
            let outcome = commands::run(&dataset, &c, &out)?;
            if outcome.diverged {
                return Err(CliError::Diverged);
            }
            Ok(())
        }
        Command::Eval { estimate, dataset, out } => {
            let m = commands::eval(&estimate, &dataset)?;
            let path = out.unwrap_or_else(|| estimate.with_file_name(commands::METRICS_FILE));
            let text = serde_json::to_string_pretty(&m).map_err(vid_core::Error::from)?;
            std::fs::write(&path, text + "\n").map_err(|e| vid_core::Error::Io {
                path: path.clone(),
                source: e,
            })?;
            print_json(&m)
        }
        Command::Compare {
            dataset,
            out,
            modes,
            with,
            cfg,
        } => {
            let base = cfg.load()?;
            let mut runs: Vec<(String, ExperimentConfig)> = modes
                .iter()
                .map(|m| {
                    let mut c = base.clone();
                    c.solver.mode = *m;
                    (m.to_string(), c)
                })
                .collect();
            for path in &with {
                runs.push((
                    label_of(path),
                    ExperimentConfig::load(Some(path), cfg.preset, &cfg.overrides)?,
                ));
            }
            let rows = commands::compare(&dataset, &runs, &out)?;
            emit(&commands::compare_markdown(&rows));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VID_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
