//! Fixed-lag sliding-window estimator: keyframe management, factor
//! assembly, damped Gauss-Newton and Schur-complement marginalization.

mod batch;
mod features;
mod solve;

use std::collections::BTreeMap;
use std::str::FromStr;

use nalgebra::{SMatrix, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factors::{
    dynamics_covariance, sqrt_information, vimo_covariance, FeatureState, ForceIndex, MargPrior, NavState,
};
use crate::preint::{DynPreintegration, ImuPreintegration};
use crate::sim::LandmarkObservation;

pub use batch::{
    read_estimate_csv, run_batch, write_estimate_csv, BatchOutput, EstimateRecord, EstimatorConfig, InitConfig,
    RunReport, StageTiming, ESTIMATE_COLUMNS,
};
pub use features::{triangulate_midpoint, Feature, DEFAULT_DEPTH, MIN_PARALLAX_DEG};
pub use solve::OptimizeReport;

/// Which cost terms model the external force.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Full dynamics factor with the preintegrated force measurement.
    #[default]
    Proposed,
    /// Force row replaced by a zero-mean Gaussian prior on `F`.
    VimoMode,
    /// No dynamics factors at all.
    VioOnly,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Proposed => "proposed",
            Self::VimoMode => "vimo_mode",
            Self::VioOnly => "vio_only",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "proposed" => Ok(Self::Proposed),
            "vimo_mode" | "vimo" => Ok(Self::VimoMode),
            "vio_only" | "vio" => Ok(Self::VioOnly),
            other => Err(Error::invalid(format!(
                "unknown mode '{other}' (expected proposed, vimo_mode or vio_only)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub initial_damping: f64,
    /// Relative cost decrease below which the solve stops.
    pub tolerance: f64,
    /// Number of states kept after marginalization; the window holds up to `n + 1`.
    pub window_size: usize,
    /// Huber threshold on the whitened reprojection error.
    pub huber_threshold: f64,
    pub mode: Mode,
    pub force_index: ForceIndex,
    /// Std-dev of the zero-mean force prior in `vimo_mode`, m/s².
    pub vimo_force_sigma: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 15,
            initial_damping: 1e-4,
            tolerance: 1e-9,
            window_size: 10,
            huber_threshold: 1.0,
            mode: Mode::Proposed,
            force_index: ForceIndex::Current,
            vimo_force_sigma: 0.02,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size < 2 {
            return Err(Error::invalid("window_size must be >= 2"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations must be >= 1"));
        }
        let positive = [
            ("initial_damping", self.initial_damping),
            ("huber_threshold", self.huber_threshold),
            ("vimo_force_sigma", self.vimo_force_sigma),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and > 0")));
            }
        }
        if !(self.tolerance.is_finite() && self.tolerance >= 0.0) {
            return Err(Error::invalid("tolerance must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Preintegrated measurements of one interval with their cached whitening.
#[derive(Debug, Clone)]
pub struct Interval {
    pub dyn_block: DynPreintegration,
    pub imu_block: ImuPreintegration,
    dyn_sqrt: SMatrix<f64, 12, 12>,
    vimo_sqrt: SMatrix<f64, 9, 9>,
    imu_sqrt: SMatrix<f64, 15, 15>,
}

impl Interval {
    pub fn new(dyn_block: DynPreintegration, imu_block: ImuPreintegration) -> Result<Self> {
        if !dyn_block.is_finalized() {
            return Err(Error::NotFinalized);
        }
        Ok(Self {
            dyn_sqrt: sqrt_information(&dynamics_covariance(&dyn_block), "dynamics factor"),
            vimo_sqrt: sqrt_information(&vimo_covariance(&dyn_block), "dynamics factor"),
            imu_sqrt: sqrt_information(imu_block.covariance(), "inertial factor"),
            dyn_block,
            imu_block,
        })
    }
}

/// States `x_0..x_N` (N ≤ n), landmarks, per-interval preintegrations and
/// the marginalization prior on the oldest states.
#[derive(Debug, Clone)]
pub struct SlidingWindow {
    config: SolverConfig,
    states: Vec<NavState>,
    /// Sequence number of `states[0]`; keyframes are numbered from 0.
    first_seq: u64,
    features: BTreeMap<u32, Feature>,
    intervals: Vec<Interval>,
    prior: MargPrior,
}

impl SlidingWindow {
    pub fn new(config: SolverConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            states: Vec::new(),
            first_seq: 0,
            features: BTreeMap::new(),
            intervals: Vec::new(),
            prior: MargPrior::empty(),
        })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn states(&self) -> &[NavState] {
        &self.states
    }

    pub fn states_mut(&mut self) -> &mut [NavState] {
        &mut self.states
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    pub fn features(&self) -> &BTreeMap<u32, Feature> {
        &self.features
    }

    pub fn prior(&self) -> &MargPrior {
        &self.prior
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn first_seq(&self) -> u64 {
        self.first_seq
    }

    /// Replaces the prior; it must not cover more states than the window holds.
    pub fn set_prior(&mut self, prior: MargPrior) -> Result<()> {
        if prior.num_states() > self.states.len() {
            return Err(Error::DimensionMismatch {
                expected: self.states.len(),
                got: prior.num_states(),
            });
        }
        self.prior = prior;
        Ok(())
    }

    /// Starts the window with its first keyframe.
    pub fn init(&mut self, state: NavState, observations: &[LandmarkObservation]) -> Result<()> {
        if !self.states.is_empty() {
            return Err(Error::invalid("window is already initialized"));
        }
        if !state.is_finite() {
            return Err(Error::invalid("initial state is not finite"));
        }
        self.states.push(state);
        self.add_observations(observations)
    }

    /// Appends a keyframe connected to the newest state by `dyn_block` and `imu_block`.
    pub fn add_keyframe(
        &mut self,
        mut guess: NavState,
        dyn_block: DynPreintegration,
        imu_block: ImuPreintegration,
        observations: &[LandmarkObservation],
    ) -> Result<()> {
        let last = *self
            .states
            .last()
            .ok_or_else(|| Error::invalid("add_keyframe on an empty window; call init first"))?;
        if self.states.len() > self.config.window_size {
            return Err(Error::invalid("window is full; marginalize before adding"));
        }
        if !dyn_block.is_finalized() {
            return Err(Error::NotFinalized);
        }
        if !(guess.t > last.t + 1e-9) {
            return Err(Error::invalid(format!(
                "keyframe at t = {} does not follow the newest keyframe at t = {}",
                guess.t, last.t
            )));
        }
        let span = guess.t - last.t;
        if (dyn_block.dt_total() - span).abs() > 1e-6 || (imu_block.dt_total() - span).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "preintegration spans {:.6} s but the keyframes are {span:.6} s apart",
                dyn_block.dt_total()
            )));
        }
        if !guess.is_finite() {
            return Err(Error::invalid("keyframe guess is not finite"));
        }
        if self.config.mode != Mode::VioOnly {
            let favg = dyn_block.favg()?;
            guess.f = favg;
            if self.config.force_index == ForceIndex::Current {
                let n = self.states.len();
                self.states[n - 1].f = favg;
            }
        }
        self.intervals.push(Interval::new(dyn_block, imu_block)?);
        self.states.push(guess);
        self.add_observations(observations)?;
        self.triangulate_pending();
        Ok(())
    }

    fn newest_seq(&self) -> u64 {
        self.first_seq + self.states.len() as u64 - 1
    }

    pub(crate) fn state_of_seq(&self, seq: u64) -> &NavState {
        &self.states[(seq - self.first_seq) as usize]
    }

    fn add_observations(&mut self, observations: &[LandmarkObservation]) -> Result<()> {
        let seq = self.newest_seq();
        for o in observations {
            if !(o.pixel_sigma.is_finite() && o.pixel_sigma > 0.0) {
                return Err(Error::invalid(format!(
                    "landmark {}: measurement sigma must be > 0",
                    o.landmark_id
                )));
            }
            match self.features.get_mut(&o.landmark_id) {
                Some(f) => {
                    if f.anchor != seq && f.obs.last().is_none_or(|(s, _)| *s != seq) {
                        f.obs.push((seq, o.bearing));
                    }
                }
                None => {
                    self.features
                        .insert(o.landmark_id, Feature::new(seq, o.bearing, o.pixel_sigma));
                }
            }
        }
        Ok(())
    }

    /// Initializes the depth of every feature seen in at least two frames.
    fn triangulate_pending(&mut self) {
        let median = self.median_depth();
        let pending: Vec<u32> = self
            .features
            .iter()
            .filter(|(_, f)| f.state.is_none() && !f.obs.is_empty())
            .map(|(id, _)| *id)
            .collect();
        for id in pending {
            let f = &self.features[&id];
            let anchor = self.state_of_seq(f.anchor);
            let (seq, u) = *f.obs.last().expect("non-empty observations");
            let obs = self.state_of_seq(seq);
            let depth = match triangulate_midpoint(anchor, &f.u_anchor, obs, &u) {
                Some((d, parallax)) if parallax >= MIN_PARALLAX_DEG.to_radians() && d > features::MIN_DEPTH => d,
                _ => median.unwrap_or(DEFAULT_DEPTH),
            };
            self.features.get_mut(&id).expect("feature exists").state = Some(FeatureState { lambda: 1.0 / depth });
        }
    }

    fn median_depth(&self) -> Option<f64> {
        let mut depths: Vec<f64> = self
            .features
            .values()
            .filter_map(|f| f.state.map(|s| 1.0 / s.lambda))
            .collect();
        if depths.is_empty() {
            return None;
        }
        depths.sort_by(f64::total_cmp);
        Some(depths[depths.len() / 2])
    }

    /// Features that contribute reprojection factors, in id order.
    pub(crate) fn active_features(&self) -> Vec<u32> {
        self.features
            .iter()
            .filter(|(_, f)| f.state.is_some() && !f.obs.is_empty())
            .map(|(id, _)| *id)
            .collect()
    }

    /// Total cost of all factors at the current estimate.
    pub fn cost(&self) -> Result<f64> {
        let ids = self.active_features();
        let lambdas: Vec<f64> = ids
            .iter()
            .map(|id| self.features[id].state.expect("active").lambda)
            .collect();
        Ok(self
            .linearize(&self.states, &ids, &lambdas, false, solve::Scope::All)?
            .iter()
            .map(|f| f.cost)
            .sum())
    }

    /// Whether `x_k`'s force variable is constrained by a dynamics factor.
    pub fn force_constrained(&self, k: usize) -> bool {
        match (self.config.mode, self.config.force_index) {
            (Mode::VioOnly, _) => false,
            (_, ForceIndex::Current) => k + 1 < self.states.len(),
            (_, ForceIndex::Next) => k >= 1 || self.first_seq > 0,
        }
    }

    pub(crate) fn observation_pairs(&self, f: &Feature) -> Vec<(usize, Vector2<f64>)> {
        f.obs.iter().map(|(s, u)| ((s - self.first_seq) as usize, *u)).collect()
    }
}
