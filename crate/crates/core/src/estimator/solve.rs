use nalgebra::{DMatrix, DVector, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factors::{
    dynamics_jacobians, dynamics_residual, force_prior, huber, inertial_jacobians, inertial_residual, prior_residual,
    schur_marginalize, vimo_jacobians, vimo_residual, ForceIndex, MargPrior, NavState, StateVec, STATE_DIM,
};

use super::features::{MAX_DEPTH, MIN_DEPTH};
use super::{Mode, SlidingWindow};

/// Whitened error assigned to a reprojection that falls behind the camera.
const BEHIND_CAMERA_ERROR: f64 = 100.0;
const MAX_DAMPING: f64 = 1e16;
const MIN_DAMPING: f64 = 1e-12;
/// Cost changes below this are treated as no change, whatever the relative size.
const ABS_COST_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Scope {
    All,
    /// Only the factors touching the oldest state.
    Marginal,
}

/// One whitened (and robustified) factor linearized at the current estimate.
pub(crate) struct FactorLin {
    pub cost: f64,
    pub r: DVector<f64>,
    pub blocks: Vec<(usize, DMatrix<f64>)>,
    pub feat: Option<(usize, DVector<f64>)>,
    /// Unit residual direction of a Huber-downweighted factor; the robust
    /// loss has no curvature along it, so it is projected out of `JᵀJ`.
    pub radial: Option<DVector<f64>>,
}

impl FactorLin {
    fn new(cost: f64, r: DVector<f64>) -> Self {
        Self {
            cost,
            r,
            blocks: Vec::new(),
            feat: None,
            radial: None,
        }
    }

    /// Jacobian columns as they enter the Hessian.
    fn curvature(&self, j: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.radial {
            Some(u) => j - u * (u.transpose() * j),
            None => j.clone(),
        }
    }

    fn curvature_vec(&self, j: &DVector<f64>) -> DVector<f64> {
        match &self.radial {
            Some(u) => j - u * u.dot(j),
            None => j.clone(),
        }
    }
}

fn dvec<const R: usize>(v: &SVector<f64, R>) -> DVector<f64> {
    DVector::from_column_slice(v.as_slice())
}

fn dmat<const R: usize>(m: &nalgebra::SMatrix<f64, R, STATE_DIM>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, STATE_DIM, m.as_slice())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizeReport {
    /// Linear solves performed, accepted or not.
    pub iterations: usize,
    /// Initial cost followed by the cost after every accepted step.
    pub costs: Vec<f64>,
    pub converged: bool,
    pub diverged: bool,
}

impl OptimizeReport {
    pub fn initial_cost(&self) -> f64 {
        self.costs.first().copied().unwrap_or(f64::NAN)
    }

    pub fn final_cost(&self) -> f64 {
        self.costs.last().copied().unwrap_or(f64::NAN)
    }
}

/// Normal equations with landmarks kept apart for Schur elimination.
struct System {
    h: DMatrix<f64>,
    g: DVector<f64>,
    fh: Vec<f64>,
    fg: Vec<f64>,
    fw: Vec<Vec<(usize, SVector<f64, STATE_DIM>)>>,
}

impl System {
    fn assemble(factors: &[FactorLin], n_states: usize, n_feats: usize) -> Self {
        let dim = n_states * STATE_DIM;
        let mut s = Self {
            h: DMatrix::zeros(dim, dim),
            g: DVector::zeros(dim),
            fh: vec![0.0; n_feats],
            fg: vec![0.0; n_feats],
            fw: vec![Vec::new(); n_feats],
        };
        for f in factors {
            let hblocks: Vec<DMatrix<f64>> = f.blocks.iter().map(|(_, j)| f.curvature(j)).collect();
            for ((ka, ja), ha) in f.blocks.iter().zip(&hblocks) {
                s.g.fixed_rows_mut::<STATE_DIM>(ka * STATE_DIM)
                    .gemv_tr(1.0, ja, &f.r, 1.0);
                for ((kb, _), hb_j) in f.blocks.iter().zip(&hblocks) {
                    let mut hb =
                        s.h.fixed_view_mut::<STATE_DIM, STATE_DIM>(ka * STATE_DIM, kb * STATE_DIM);
                    hb.gemm_tr(1.0, ha, hb_j, 1.0);
                }
            }
            if let Some((fi, jf)) = &f.feat {
                let hf = f.curvature_vec(jf);
                s.fh[*fi] += hf.norm_squared();
                s.fg[*fi] += jf.dot(&f.r);
                for ((ka, _), ha) in f.blocks.iter().zip(&hblocks) {
                    let w = SVector::<f64, STATE_DIM>::from_iterator((ha.transpose() * &hf).iter().copied());
                    match s.fw[*fi].iter_mut().find(|(k, _)| k == ka) {
                        Some((_, acc)) => *acc += w,
                        None => s.fw[*fi].push((*ka, w)),
                    }
                }
            }
        }
        s
    }

    /// Damped step `(dx, dλ)`; `None` when the reduced system is not positive definite.
    fn solve(&self, damping: f64) -> Option<(DVector<f64>, Vec<f64>)> {
        let dim = self.h.nrows();
        let mut a = self.h.clone();
        let mut rhs = -&self.g;
        let pinned: Vec<usize> = (0..dim).filter(|&i| self.h[(i, i)] == 0.0).collect();
        for i in 0..dim {
            let d = self.h[(i, i)];
            if d != 0.0 {
                a[(i, i)] += damping;
            }
        }
        let c: Vec<f64> = self
            .fh
            .iter()
            .map(|&h| if h > 0.0 { h + damping } else { 0.0 })
            .collect();
        for (fi, w) in self.fw.iter().enumerate() {
            if c[fi] <= 0.0 {
                continue;
            }
            let inv = 1.0 / c[fi];
            for (ka, wa) in w {
                let mut rb = rhs.fixed_rows_mut::<STATE_DIM>(ka * STATE_DIM);
                rb += wa * (self.fg[fi] * inv);
                for (kb, wb) in w {
                    let mut hb = a.fixed_view_mut::<STATE_DIM, STATE_DIM>(ka * STATE_DIM, kb * STATE_DIM);
                    hb.ger(-inv, wa, wb, 1.0);
                }
            }
        }
        for &i in &pinned {
            a.row_mut(i).fill(0.0);
            a.column_mut(i).fill(0.0);
            a[(i, i)] = 1.0;
            rhs[i] = 0.0;
        }
        let dx = a.cholesky()?.solve(&rhs);
        if !dx.iter().all(|v| v.is_finite()) {
            return None;
        }
        let dl = self
            .fw
            .iter()
            .enumerate()
            .map(|(fi, w)| {
                if c[fi] <= 0.0 {
                    return 0.0;
                }
                let coupling: f64 = w
                    .iter()
                    .map(|(k, wa)| wa.dot(&dx.fixed_rows::<STATE_DIM>(k * STATE_DIM)))
                    .sum();
                -(self.fg[fi] + coupling) / c[fi]
            })
            .collect();
        Some((dx, dl))
    }
}

impl SlidingWindow {
    pub(crate) fn linearize(
        &self,
        states: &[NavState],
        ids: &[u32],
        lambdas: &[f64],
        jac: bool,
        scope: Scope,
    ) -> Result<Vec<FactorLin>> {
        let mut out = Vec::new();
        if !self.prior.is_empty() {
            let p = self.prior.num_states();
            let (r, j) = prior_residual(&self.prior, &states[..p])?;
            let mut fl = FactorLin::new(r.norm_squared(), r);
            if jac {
                fl.blocks = (0..p)
                    .map(|k| (k, j.columns(k * STATE_DIM, STATE_DIM).into_owned()))
                    .collect();
            }
            out.push(fl);
        }
        let n_int = match scope {
            Scope::All => self.intervals.len(),
            Scope::Marginal => self.intervals.len().min(1),
        };
        let mode = self.config.mode;
        let idx = self.config.force_index;
        for (k, iv) in self.intervals.iter().enumerate().take(n_int) {
            let (xi, xj) = (&states[k], &states[k + 1]);
            let r = iv.imu_sqrt * inertial_residual(xi, xj, &iv.imu_block);
            let mut fl = FactorLin::new(r.norm_squared(), dvec(&r));
            if jac {
                let (ji, jj) = inertial_jacobians(xi, xj, &iv.imu_block);
                fl.blocks = vec![(k, dmat(&(iv.imu_sqrt * ji))), (k + 1, dmat(&(iv.imu_sqrt * jj)))];
            }
            out.push(fl);
            match mode {
                Mode::Proposed => {
                    let r = iv.dyn_sqrt * dynamics_residual(xi, xj, &iv.dyn_block, idx)?.r;
                    let mut fl = FactorLin::new(r.norm_squared(), dvec(&r));
                    if jac {
                        let (ji, jj) = dynamics_jacobians(xi, xj, &iv.dyn_block, idx)?;
                        fl.blocks = vec![(k, dmat(&(iv.dyn_sqrt * ji))), (k + 1, dmat(&(iv.dyn_sqrt * jj)))];
                    }
                    out.push(fl);
                }
                Mode::VimoMode => {
                    let r = iv.vimo_sqrt * vimo_residual(xi, xj, &iv.dyn_block, idx)?;
                    let mut fl = FactorLin::new(r.norm_squared(), dvec(&r));
                    if jac {
                        let (ji, jj) = vimo_jacobians(xi, xj, &iv.dyn_block, idx)?;
                        fl.blocks = vec![(k, dmat(&(iv.vimo_sqrt * ji))), (k + 1, dmat(&(iv.vimo_sqrt * jj)))];
                    }
                    out.push(fl);
                    let owner = match idx {
                        ForceIndex::Current => k,
                        ForceIndex::Next => k + 1,
                    };
                    let (r, j) = force_prior(&states[owner], self.config.vimo_force_sigma);
                    let mut fl = FactorLin::new(r.norm_squared(), dvec(&r));
                    if jac {
                        fl.blocks = vec![(owner, dmat(&j))];
                    }
                    out.push(fl);
                }
                Mode::VioOnly => {}
            }
        }
        let delta = self.config.huber_threshold;
        for (fi, id) in ids.iter().enumerate() {
            let f = &self.features[id];
            let a = (f.anchor - self.first_seq) as usize;
            if scope == Scope::Marginal && a != 0 {
                continue;
            }
            let w = 1.0 / f.sigma;
            for (o, u) in self.observation_pairs(f) {
                let Some(e) = crate::factors::visual_residual(&states[a], &states[o], lambdas[fi], &f.u_anchor, &u)
                else {
                    let (rho, _) = huber(BEHIND_CAMERA_ERROR * BEHIND_CAMERA_ERROR, delta);
                    out.push(FactorLin::new(rho, DVector::zeros(0)));
                    continue;
                };
                let r = e.r * w;
                let (rho, drho) = huber(r.norm_squared(), delta);
                let sw = drho.sqrt() * w;
                let mut fl = FactorLin::new(rho, dvec(&(e.r * sw)));
                if jac {
                    fl.blocks = vec![(a, dmat(&(e.j_anchor * sw))), (o, dmat(&(e.j_obs * sw)))];
                    fl.feat = Some((fi, dvec(&(e.j_lambda * sw))));
                    if drho < 1.0 {
                        fl.radial = Some(fl.r.normalize());
                    }
                }
                out.push(fl);
            }
        }
        Ok(out)
    }

    fn total_cost(&self, states: &[NavState], ids: &[u32], lambdas: &[f64]) -> Result<f64> {
        Ok(self
            .linearize(states, ids, lambdas, false, Scope::All)?
            .iter()
            .map(|f| f.cost)
            .sum())
    }

    /// Damped Gauss-Newton over all window states and landmark depths.
    pub fn optimize(&mut self) -> Result<OptimizeReport> {
        if self.states.len() < 2 {
            return Err(Error::invalid("optimize needs at least two states"));
        }
        let ids = self.active_features();
        let mut lambdas: Vec<f64> = ids
            .iter()
            .map(|id| self.features[id].state.expect("active feature").lambda)
            .collect();
        let mut report = OptimizeReport::default();
        let mut cost = self.total_cost(&self.states, &ids, &lambdas)?;
        report.costs.push(cost);
        if !cost.is_finite() {
            report.diverged = true;
            return Ok(report);
        }
        let tol = self.config.tolerance;
        let mut damping = self.config.initial_damping;
        while report.iterations < self.config.max_iterations && !report.converged {
            if cost == 0.0 {
                report.converged = true;
                break;
            }
            let factors = self.linearize(&self.states, &ids, &lambdas, true, Scope::All)?;
            let system = System::assemble(&factors, self.states.len(), ids.len());
            let mut accepted = false;
            while report.iterations < self.config.max_iterations {
                report.iterations += 1;
                if let Some((dx, dl)) = system.solve(damping) {
                    let cand: Vec<NavState> = self
                        .states
                        .iter()
                        .enumerate()
                        .map(|(k, x)| {
                            x.boxplus(&StateVec::from_column_slice(
                                dx.rows(k * STATE_DIM, STATE_DIM).as_slice(),
                            ))
                        })
                        .collect();
                    let cand_l: Vec<f64> = lambdas
                        .iter()
                        .zip(&dl)
                        .map(|(l, d)| (l + d).clamp(1.0 / MAX_DEPTH, 1.0 / MIN_DEPTH))
                        .collect();
                    let new_cost = self.total_cost(&cand, &ids, &cand_l)?;
                    if new_cost.is_finite() && new_cost <= cost {
                        let decrease = cost - new_cost;
                        self.states = cand;
                        lambdas = cand_l;
                        report.converged = decrease <= tol * cost + ABS_COST_TOL;
                        cost = new_cost;
                        report.costs.push(cost);
                        damping = (damping / 10.0).max(MIN_DAMPING);
                        accepted = true;
                        break;
                    }
                    if new_cost.is_finite() && (new_cost - cost).abs() <= tol * cost + ABS_COST_TOL {
                        report.converged = true;
                        break;
                    }
                }
                damping *= 10.0;
                if damping > MAX_DAMPING {
                    break;
                }
            }
            if !accepted {
                // No descent direction left at any damping: a local minimum.
                report.converged = report.converged || damping > MAX_DAMPING;
                break;
            }
        }
        if !self.states.iter().all(NavState::is_finite) || !cost.is_finite() {
            report.diverged = true;
        }
        for (id, l) in ids.iter().zip(&lambdas) {
            let f = self.features.get_mut(id).expect("active feature");
            f.state = (l.is_finite() && *l > 1.0 / MAX_DEPTH && *l < 1.0 / MIN_DEPTH)
                .then_some(crate::factors::FeatureState { lambda: *l });
        }
        Ok(report)
    }

    /// Removes the oldest state, folding its factors and the landmarks
    /// anchored in it into the prior on the remaining states.
    pub fn marginalize(&mut self) -> Result<NavState> {
        let n = self.states.len();
        if n < 2 {
            return Err(Error::invalid("marginalize needs at least two states"));
        }
        let all = self.active_features();
        let lambdas: Vec<f64> = all
            .iter()
            .map(|id| self.features[id].state.expect("active feature").lambda)
            .collect();
        let marg: Vec<usize> = all
            .iter()
            .enumerate()
            .filter(|(_, id)| self.features[id].anchor == self.first_seq)
            .map(|(i, _)| i)
            .collect();
        let factors = self.linearize(&self.states, &all, &lambdas, true, Scope::Marginal)?;
        let m = marg.len();
        let dim = m + n * STATE_DIM;
        let mut h = DMatrix::zeros(dim, dim);
        let mut g = DVector::zeros(dim);
        for f in &factors {
            // Column blocks in the dense ordering [λ_marg, x_0, …, x_N].
            let mut cols: Vec<(usize, DMatrix<f64>)> =
                f.blocks.iter().map(|(k, j)| (m + k * STATE_DIM, j.clone())).collect();
            if let Some((fi, jf)) = &f.feat {
                let pos = marg
                    .iter()
                    .position(|i| i == fi)
                    .expect("marginal scope only holds anchored features");
                cols.push((pos, DMatrix::from_column_slice(jf.len(), 1, jf.as_slice())));
            }
            let hcols: Vec<DMatrix<f64>> = cols.iter().map(|(_, j)| f.curvature(j)).collect();
            for ((ca, ja), ha) in cols.iter().zip(&hcols) {
                let mut gb = g.rows_mut(*ca, ja.ncols());
                gb += ja.transpose() * &f.r;
                let hat = ha.transpose();
                for ((cb, jb), hb) in cols.iter().zip(&hcols) {
                    let mut hv = h.view_mut((*ca, *cb), (ja.ncols(), jb.ncols()));
                    hv += &hat * hb;
                }
            }
        }
        let (hp, gp) = schur_marginalize(&h, &g, m + STATE_DIM);
        let prior = MargPrior::from_information(self.states[1..].to_vec(), &hp, &gp)?;
        self.reanchor_oldest();
        self.prior = prior;
        let removed = self.states.remove(0);
        if !self.intervals.is_empty() {
            self.intervals.remove(0);
        }
        self.first_seq += 1;
        Ok(removed)
    }

    /// Moves features anchored in the oldest keyframe to their next
    /// observing keyframe. Landmarks with a depth keep their estimated
    /// position: the new anchor bearing is the predicted one, not the
    /// measurement, so no pixel noise is injected into the map.
    fn reanchor_oldest(&mut self) {
        let old = self.first_seq;
        let ids: Vec<u32> = self
            .features
            .iter()
            .filter(|(_, f)| f.anchor == old)
            .map(|(id, _)| *id)
            .collect();
        for id in ids {
            let f = self.features[&id].clone();
            if f.obs.is_empty() {
                self.features.remove(&id);
                continue;
            }
            let (seq, u) = f.obs[0];
            let moved = f.state.and_then(|s| {
                let a = self.state_of_seq(old);
                let b = self.state_of_seq(seq);
                let pw = a.q * (nalgebra::Vector3::new(f.u_anchor.x, f.u_anchor.y, 1.0) / s.lambda) + a.p;
                let pc = b.q.inverse() * (pw - b.p);
                (pc.z > MIN_DEPTH && pc.z < MAX_DEPTH).then(|| {
                    (
                        nalgebra::Vector2::new(pc.x / pc.z, pc.y / pc.z),
                        crate::factors::FeatureState { lambda: 1.0 / pc.z },
                    )
                })
            });
            let nf = self.features.get_mut(&id).expect("feature exists");
            nf.anchor = seq;
            match moved {
                Some((ua, state)) => {
                    nf.u_anchor = ua;
                    nf.state = Some(state);
                }
                None => {
                    nf.u_anchor = u;
                    nf.state = None;
                }
            }
            nf.obs.remove(0);
        }
    }
}
