use nalgebra::{Matrix3, SMatrix, UnitQuaternion, Vector3};
use serde_json::json;

use crate::error::{Error, Result};
use crate::geometry::{increment_jacobian, quat_increment, quat_integrate, skew};

use super::{FusedSample, ProcessNoise};

/// Internal error state `[δα, δβ, δJ, δθ, δb_a, δb_ω]`.
pub const DYN_ERR_DIM: usize = 18;
/// Reported error state `[δα, δβ, δF, δb_a, δb_ω]`.
pub const DYN_REPORT_DIM: usize = 15;
const NOISE_DIM: usize = 15;

const A: usize = 0;
const B: usize = 3;
const F: usize = 6;
const TH: usize = 9;
const BA: usize = 12;
const BW: usize = 15;

// Noise vector n = [n_T, n_ω, n_bω, n_a, n_ba].
const N_T: usize = 0;
const N_W: usize = 3;
const N_BW: usize = 6;
const N_A: usize = 9;
const N_BA: usize = 12;

pub type Mat18 = SMatrix<f64, DYN_ERR_DIM, DYN_ERR_DIM>;
pub type Mat15 = SMatrix<f64, DYN_REPORT_DIM, DYN_REPORT_DIM>;
type Noise18 = SMatrix<f64, DYN_ERR_DIM, NOISE_DIM>;
type NoiseCov = SMatrix<f64, NOISE_DIM, NOISE_DIM>;

/// Internal rows kept in the reported 15-dim state.
const REPORT_ROWS: [usize; DYN_REPORT_DIM] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 12, 13, 14, 15, 16, 17];

/// Preintegrated thrust and external-force terms over one keyframe interval.
///
/// Propagation is a first-order hold at the fused sample rate: thrust and
/// force integrands are averaged between consecutive samples and the
/// rotation advances with the earlier sample's rate. The interval's
/// linearization biases are held fixed. The force integral is kept
/// as a sum until [`finalize`](Self::finalize) divides it by the elapsed time.
#[derive(Debug, Clone, PartialEq)]
pub struct DynPreintegration {
    alpha: Vector3<f64>,
    beta: Vector3<f64>,
    fsum: Vector3<f64>,
    favg: Vector3<f64>,
    gamma: UnitQuaternion<f64>,
    dt_total: f64,
    cov: Mat18,
    jac: Mat18,
    lin_ba: Vector3<f64>,
    lin_bw: Vector3<f64>,
    noise: ProcessNoise,
    finalized: bool,
    samples: Vec<(FusedSample, FusedSample)>,
}

/// Bias-corrected preintegrated terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynCorrected {
    pub alpha: Vector3<f64>,
    pub beta: Vector3<f64>,
    pub favg: Vector3<f64>,
}

impl DynPreintegration {
    pub fn new(lin_ba: Vector3<f64>, lin_bw: Vector3<f64>, noise: ProcessNoise) -> Self {
        Self {
            alpha: Vector3::zeros(),
            beta: Vector3::zeros(),
            fsum: Vector3::zeros(),
            favg: Vector3::zeros(),
            gamma: UnitQuaternion::identity(),
            dt_total: 0.0,
            cov: Mat18::zeros(),
            jac: Mat18::identity(),
            lin_ba,
            lin_bw,
            noise,
            finalized: false,
            samples: Vec::new(),
        }
    }

    /// Builds and finalizes a block from consecutive sample nodes.
    pub fn from_nodes(
        nodes: &[FusedSample],
        lin_ba: Vector3<f64>,
        lin_bw: Vector3<f64>,
        noise: ProcessNoise,
    ) -> Result<Self> {
        let mut block = Self::new(lin_ba, lin_bw, noise);
        for w in nodes.windows(2) {
            block.push_pair(&w[0], &w[1])?;
        }
        block.finalize()?;
        Ok(block)
    }

    pub fn alpha(&self) -> Vector3<f64> {
        self.alpha
    }

    pub fn beta(&self) -> Vector3<f64> {
        self.beta
    }

    /// Running force integral (before averaging).
    pub fn fsum(&self) -> Vector3<f64> {
        self.fsum
    }

    pub fn favg(&self) -> Result<Vector3<f64>> {
        if self.finalized {
            Ok(self.favg)
        } else {
            Err(Error::NotFinalized)
        }
    }

    pub fn gamma(&self) -> UnitQuaternion<f64> {
        self.gamma
    }

    pub fn dt_total(&self) -> f64 {
        self.dt_total
    }

    pub fn lin_ba(&self) -> Vector3<f64> {
        self.lin_ba
    }

    pub fn lin_bw(&self) -> Vector3<f64> {
        self.lin_bw
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    pub fn noise(&self) -> &ProcessNoise {
        &self.noise
    }

    /// Covariance over `[δα, δβ, δF, δb_a, δb_ω]` (`δJ` before finalize).
    pub fn covariance(&self) -> Mat15 {
        Mat15::from_fn(|i, j| self.cov[(REPORT_ROWS[i], REPORT_ROWS[j])])
    }

    /// Jacobian of the reported terms w.r.t. the initial error state.
    pub fn jacobian(&self) -> Mat15 {
        Mat15::from_fn(|i, j| self.jac[(REPORT_ROWS[i], REPORT_ROWS[j])])
    }

    /// Full internal covariance including the rotation error.
    pub fn full_covariance(&self) -> &Mat18 {
        &self.cov
    }

    fn check_step(&self, s0: &FusedSample, s1: &FusedSample) -> Result<f64> {
        if self.finalized {
            return Err(Error::invalid("cannot propagate a finalized block"));
        }
        let dt = s1.t - s0.t;
        if !s0.is_finite() || !s1.is_finite() || !dt.is_finite() {
            return Err(Error::invalid("non-finite sample in propagation"));
        }
        if dt <= 0.0 || dt >= 0.1 {
            return Err(Error::invalid(format!("propagation step dt = {dt} outside (0, 0.1)")));
        }
        Ok(dt)
    }

    /// Advances the nominal terms from `s0` to `s1`: thrust and force
    /// integrands are averaged over the step, the rotation uses `s0`'s rate.
    pub fn propagate(&mut self, s0: &FusedSample, s1: &FusedSample) -> Result<()> {
        let dt = self.check_step(s0, s1)?;
        let r0 = self.gamma.to_rotation_matrix().into_inner();
        let gamma1 = quat_integrate(&self.gamma, &(s0.gyro - self.lin_bw), dt)?;
        let r1 = gamma1.to_rotation_matrix().into_inner();
        let mt = 0.5 * (r0 * s0.thrust + r1 * s1.thrust);
        let mf = 0.5 * (r0 * (s0.accel - self.lin_ba - s0.thrust) + r1 * (s1.accel - self.lin_ba - s1.thrust));
        self.alpha += self.beta * dt + 0.5 * mt * dt * dt;
        self.beta += mt * dt;
        self.fsum += mf * dt;
        self.gamma = gamma1;
        self.dt_total += dt;
        Ok(())
    }

    /// Advances `P` and `J` through the step; must run before
    /// [`propagate`](Self::propagate) for the same pair.
    pub fn propagate_covariance(&mut self, s0: &FusedSample, s1: &FusedSample) -> Result<()> {
        let dt = self.check_step(s0, s1)?;
        let (f, g) = self.transition(s0, s1);
        let q = self.noise_covariance(dt);
        let p = f * self.cov * f.transpose() + g * q * g.transpose();
        self.cov = 0.5 * (p + p.transpose());
        self.jac = f * self.jac;
        Ok(())
    }

    /// Covariance and nominal propagation over `[s0.t, s1.t]`, recording the
    /// pair so the block can be re-propagated at other biases.
    pub fn push_pair(&mut self, s0: &FusedSample, s1: &FusedSample) -> Result<()> {
        self.propagate_covariance(s0, s1)?;
        self.propagate(s0, s1)?;
        self.samples.push((*s0, *s1));
        Ok(())
    }

    /// One step with `s` held constant for `dt`.
    pub fn push(&mut self, s: &FusedSample, dt: f64) -> Result<()> {
        self.push_pair(s, &FusedSample { t: s.t + dt, ..*s })
    }

    /// Error-state transition `F_i` and noise input `G_i` of one step, for
    /// `δ = true − nominal`.
    pub fn transition(&self, s0: &FusedSample, s1: &FusedSample) -> (Mat18, Noise18) {
        let dt = s1.t - s0.t;
        let r0 = self.gamma.to_rotation_matrix().into_inner();
        let theta = (s0.gyro - self.lin_bw) * dt;
        let dr = quat_increment(&theta).to_rotation_matrix().into_inner();
        let r1 = r0 * dr;
        let jinc = increment_jacobian(&theta);
        let c0 = s0.accel - self.lin_ba - s0.thrust;
        let c1 = s1.accel - self.lin_ba - s1.thrust;
        let i3 = Matrix3::identity();
        let h = 0.5 * dt * dt;

        // Derivatives of the averaged thrust and force integrands.
        let t_th = -0.5 * (r0 * skew(&s0.thrust) + r1 * skew(&s1.thrust) * dr.transpose());
        let t_bw = 0.5 * r1 * skew(&s1.thrust) * jinc * dt;
        let f_th = -0.5 * (r0 * skew(&c0) + r1 * skew(&c1) * dr.transpose());
        let f_bw = 0.5 * r1 * skew(&c1) * jinc * dt;
        let rm = 0.5 * (r0 + r1);

        let mut f = Mat18::identity();
        f.fixed_view_mut::<3, 3>(A, B).copy_from(&(i3 * dt));
        f.fixed_view_mut::<3, 3>(A, TH).copy_from(&(h * t_th));
        f.fixed_view_mut::<3, 3>(A, BW).copy_from(&(h * t_bw));
        f.fixed_view_mut::<3, 3>(B, TH).copy_from(&(dt * t_th));
        f.fixed_view_mut::<3, 3>(B, BW).copy_from(&(dt * t_bw));
        f.fixed_view_mut::<3, 3>(F, TH).copy_from(&(dt * f_th));
        f.fixed_view_mut::<3, 3>(F, BA).copy_from(&(-dt * rm));
        f.fixed_view_mut::<3, 3>(F, BW).copy_from(&(dt * f_bw));
        f.fixed_view_mut::<3, 3>(TH, TH).copy_from(&dr.transpose());
        f.fixed_view_mut::<3, 3>(TH, BW).copy_from(&(-jinc * dt));

        let mut g = Noise18::zeros();
        g.fixed_view_mut::<3, 3>(A, N_T).copy_from(&(-h * rm));
        g.fixed_view_mut::<3, 3>(A, N_W).copy_from(&(h * t_bw));
        g.fixed_view_mut::<3, 3>(B, N_T).copy_from(&(-dt * rm));
        g.fixed_view_mut::<3, 3>(B, N_W).copy_from(&(dt * t_bw));
        g.fixed_view_mut::<3, 3>(F, N_T).copy_from(&(dt * rm));
        g.fixed_view_mut::<3, 3>(F, N_A).copy_from(&(-dt * rm));
        g.fixed_view_mut::<3, 3>(F, N_W).copy_from(&(dt * f_bw));
        g.fixed_view_mut::<3, 3>(TH, N_W).copy_from(&(-jinc * dt));
        g.fixed_view_mut::<3, 3>(BA, N_BA).copy_from(&i3);
        g.fixed_view_mut::<3, 3>(BW, N_BW).copy_from(&i3);
        (f, g)
    }

    /// `Q` over `[n_T, n_ω, n_bω, n_a, n_ba]` for one step of `dt`.
    pub fn noise_covariance(&self, dt: f64) -> NoiseCov {
        let n = &self.noise;
        let mut q = NoiseCov::zeros();
        let diag = [
            (N_T, n.sigma_t.powi(2)),
            (N_W, n.sigma_w.powi(2)),
            (N_BW, n.sigma_bw.powi(2) * dt),
            (N_A, n.sigma_a.powi(2)),
            (N_BA, n.sigma_ba.powi(2) * dt),
        ];
        for (k, v) in diag {
            for i in 0..3 {
                q[(k + i, k + i)] = v;
            }
        }
        q
    }

    /// Divides the force integral by the elapsed time and rescales the force
    /// rows of `J` and rows/columns of `P` to match.
    pub fn finalize(&mut self) -> Result<()> {
        if self.finalized {
            return Ok(());
        }
        if !(self.dt_total > 0.0) {
            return Err(Error::invalid("cannot finalize a block with zero elapsed time"));
        }
        let inv = 1.0 / self.dt_total;
        self.favg = self.fsum * inv;
        let mut scale = Mat18::identity();
        for i in F..F + 3 {
            scale[(i, i)] = inv;
        }
        let p = scale * self.cov * scale;
        self.cov = 0.5 * (p + p.transpose());
        self.jac = scale * self.jac;
        self.finalized = true;
        Ok(())
    }

    /// First-order bias correction of the finalized terms.
    pub fn correct_bias(&self, ba: &Vector3<f64>, bw: &Vector3<f64>) -> Result<DynCorrected> {
        if !self.finalized {
            return Err(Error::NotFinalized);
        }
        let dba = ba - self.lin_ba;
        let dbw = bw - self.lin_bw;
        let j = &self.jac;
        Ok(DynCorrected {
            alpha: self.alpha + j.fixed_view::<3, 3>(A, BW) * dbw,
            beta: self.beta + j.fixed_view::<3, 3>(B, BW) * dbw,
            favg: self.favg + j.fixed_view::<3, 3>(F, BA) * dba + j.fixed_view::<3, 3>(F, BW) * dbw,
        })
    }

    /// Jacobian blocks `(J^α_bω, J^β_bω, J^F_ba, J^F_bω)` of a finalized block.
    pub fn bias_jacobians(&self) -> (Matrix3<f64>, Matrix3<f64>, Matrix3<f64>, Matrix3<f64>) {
        let j = &self.jac;
        (
            j.fixed_view::<3, 3>(A, BW).into_owned(),
            j.fixed_view::<3, 3>(B, BW).into_owned(),
            j.fixed_view::<3, 3>(F, BA).into_owned(),
            j.fixed_view::<3, 3>(F, BW).into_owned(),
        )
    }

    /// Recomputes the block from its recorded samples at new biases.
    pub fn repropagate(&self, ba: Vector3<f64>, bw: Vector3<f64>) -> Result<Self> {
        let mut out = Self::new(ba, bw, self.noise);
        for (s0, s1) in &self.samples {
            out.push_pair(s0, s1)?;
        }
        if self.finalized {
            out.finalize()?;
        }
        Ok(out)
    }

    /// Debug dump of the block for fixtures.
    pub fn to_json(&self) -> serde_json::Value {
        let rows = |m: &Mat15| -> Vec<Vec<f64>> {
            (0..DYN_REPORT_DIM)
                .map(|i| m.row(i).iter().copied().collect())
                .collect()
        };
        let q = self.gamma.quaternion();
        json!({
            "alpha": self.alpha.as_slice(),
            "beta": self.beta.as_slice(),
            "fsum": self.fsum.as_slice(),
            "favg": if self.finalized { Some(self.favg.as_slice().to_vec()) } else { None },
            "gamma": [q.w, q.i, q.j, q.k],
            "dt_total": self.dt_total,
            "lin_ba": self.lin_ba.as_slice(),
            "lin_bw": self.lin_bw.as_slice(),
            "finalized": self.finalized,
            "P": rows(&self.covariance()),
            "J": rows(&self.jacobian()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::quat_boxminus;
    use crate::geometry::quat_boxplus;
    use approx::assert_relative_eq;
    use nalgebra::SVector;
    use proptest::prelude::*;

    fn sample(thrust: f64, accel: f64) -> FusedSample {
        FusedSample {
            t: 0.0,
            accel: Vector3::new(0.0, 0.0, accel),
            gyro: Vector3::zeros(),
            thrust: Vector3::new(0.0, 0.0, thrust),
        }
    }

    #[test]
    fn constant_integrand() {
        let mut b = DynPreintegration::new(Vector3::zeros(), Vector3::zeros(), ProcessNoise::zero());
        for _ in 0..100 {
            b.push(&sample(10.0, 12.0), 0.01).unwrap();
        }
        assert_relative_eq!(b.beta(), Vector3::new(0.0, 0.0, 10.0), epsilon = 1e-9);
        assert_relative_eq!(b.fsum(), Vector3::new(0.0, 0.0, 2.0), epsilon = 1e-9);
        // The ½·T·dt² term reproduces ½·T·t² exactly for a constant integrand.
        assert_relative_eq!(b.alpha(), Vector3::new(0.0, 0.0, 5.0), epsilon = 1e-9);
        assert_relative_eq!(b.dt_total(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn linear_thrust_ramp_is_integrated_exactly() {
        // T(t) = 9 + 2t over 1 s: β = 10, α = ½·9 + 2/6.
        let nodes: Vec<FusedSample> = (0..=100)
            .map(|i| {
                let t = i as f64 * 0.01;
                FusedSample {
                    t,
                    ..sample(9.0 + 2.0 * t, 9.0 + 2.0 * t)
                }
            })
            .collect();
        let b =
            DynPreintegration::from_nodes(&nodes, Vector3::zeros(), Vector3::zeros(), ProcessNoise::zero()).unwrap();
        assert_relative_eq!(b.beta(), Vector3::new(0.0, 0.0, 10.0), epsilon = 1e-12);
        // α carries an O(dt²) term from the ½·m·dt² step.
        assert_relative_eq!(b.alpha(), Vector3::new(0.0, 0.0, 4.5 + 1.0 / 3.0), epsilon = 1e-4);
        assert_relative_eq!(b.favg().unwrap(), Vector3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn zero_inputs_stay_at_rest() {
        let mut b = DynPreintegration::new(Vector3::zeros(), Vector3::zeros(), ProcessNoise::zero());
        for _ in 0..50 {
            b.push(&sample(0.0, 0.0), 0.005).unwrap();
        }
        assert_eq!(b.alpha(), Vector3::zeros());
        assert_eq!(b.beta(), Vector3::zeros());
        assert_eq!(b.fsum(), Vector3::zeros());
        assert_eq!(b.gamma(), UnitQuaternion::identity());
        assert_eq!(*b.full_covariance(), Mat18::zeros());
    }

    #[test]
    fn rejects_bad_steps() {
        let mut b = DynPreintegration::new(Vector3::zeros(), Vector3::zeros(), ProcessNoise::zero());
        assert!(b.push(&sample(f64::NAN, 0.0), 0.01).is_err());
        assert!(b.push(&sample(1.0, 0.0), 0.0).is_err());
        assert!(b.push(&sample(1.0, 0.0), 0.2).is_err());
        assert!(matches!(b.finalize(), Err(Error::InvalidArgument(_))));
        assert!(matches!(
            b.correct_bias(&Vector3::zeros(), &Vector3::zeros()),
            Err(Error::NotFinalized)
        ));
        b.push(&sample(1.0, 0.0), 0.01).unwrap();
        b.finalize().unwrap();
        assert!(b.push(&sample(1.0, 0.0), 0.01).is_err());
    }

    #[test]
    fn finalize_averages_force() {
        let mut b = DynPreintegration::new(Vector3::zeros(), Vector3::zeros(), ProcessNoise::zero());
        for _ in 0..50 {
            b.push(
                &FusedSample {
                    accel: Vector3::new(2.0, 0.0, 0.0),
                    ..sample(0.0, 0.0)
                },
                0.01,
            )
            .unwrap();
        }
        assert_relative_eq!(b.fsum(), Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
        b.finalize().unwrap();
        assert_relative_eq!(b.favg().unwrap(), Vector3::new(2.0, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn thrust_noise_accumulates_linearly_in_beta() {
        let noise = ProcessNoise {
            sigma_t: 0.05,
            ..ProcessNoise::zero()
        };
        let mut b = DynPreintegration::new(Vector3::zeros(), Vector3::zeros(), noise);
        let (n, dt) = (200, 0.0025);
        for _ in 0..n {
            b.push(&sample(9.79, 9.79), dt).unwrap();
        }
        let var = b.covariance()[(5, 5)];
        assert_relative_eq!(var, 0.05f64.powi(2) * n as f64 * dt * dt, epsilon = 1e-12);
    }

    #[test]
    fn zero_sigmas_keep_zero_covariance() {
        let mut b = DynPreintegration::new(Vector3::new(0.1, 0.0, 0.0), Vector3::zeros(), ProcessNoise::zero());
        for i in 0..100 {
            let s = FusedSample {
                gyro: Vector3::new(0.3, -0.2, 0.1 * i as f64),
                ..sample(9.0, 11.0)
            };
            b.push(&s, 0.0025).unwrap();
        }
        b.finalize().unwrap();
        assert_eq!(b.covariance(), Mat15::zeros());
    }

    #[test]
    fn bias_correction_straight_line() {
        let mut b = DynPreintegration::new(Vector3::zeros(), Vector3::zeros(), ProcessNoise::zero());
        for _ in 0..100 {
            b.push(&sample(9.79, 10.5), 0.005).unwrap();
        }
        b.finalize().unwrap();
        let same = b.correct_bias(&Vector3::zeros(), &Vector3::zeros()).unwrap();
        assert_eq!(same.favg, b.favg().unwrap());
        assert_eq!(same.alpha, b.alpha());
        let c = b
            .correct_bias(&Vector3::new(1e-3, 0.0, 0.0), &Vector3::zeros())
            .unwrap();
        assert_relative_eq!(
            c.favg - b.favg().unwrap(),
            Vector3::new(-1e-3, 0.0, 0.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn json_dump_has_all_terms() {
        let mut b = DynPreintegration::new(Vector3::zeros(), Vector3::zeros(), ProcessNoise::zero());
        b.push(&sample(9.79, 9.79), 0.01).unwrap();
        b.finalize().unwrap();
        let v = b.to_json();
        for key in ["alpha", "beta", "favg", "gamma", "P", "J", "dt_total"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["P"].as_array().unwrap().len(), 15);
    }

    type State = (
        Vector3<f64>,
        Vector3<f64>,
        Vector3<f64>,
        UnitQuaternion<f64>,
        Vector3<f64>,
        Vector3<f64>,
    );

    /// One nominal step of the block, written out independently.
    fn step(x: &State, s0: &FusedSample, s1: &FusedSample, n: &SVector<f64, 15>) -> State {
        let (a, b, f, q, ba, bw) = *x;
        let dt = s1.t - s0.t;
        let nt = n.fixed_rows::<3>(N_T);
        let na = n.fixed_rows::<3>(N_A);
        let w = s0.gyro - n.fixed_rows::<3>(N_W) - bw;
        let q1 = q * quat_increment(&(w * dt));
        let (r0, r1) = (
            q.to_rotation_matrix().into_inner(),
            q1.to_rotation_matrix().into_inner(),
        );
        let mt = 0.5 * (r0 * (s0.thrust - nt) + r1 * (s1.thrust - nt));
        let mf = 0.5 * (r0 * (s0.accel - na - ba - s0.thrust + nt) + r1 * (s1.accel - na - ba - s1.thrust + nt));
        (
            a + b * dt + 0.5 * mt * dt * dt,
            b + mt * dt,
            f + mf * dt,
            q1,
            ba + n.fixed_rows::<3>(N_BA),
            bw + n.fixed_rows::<3>(N_BW),
        )
    }

    fn plus(x: &State, d: &SVector<f64, 18>) -> State {
        (
            x.0 + d.fixed_rows::<3>(A),
            x.1 + d.fixed_rows::<3>(B),
            x.2 + d.fixed_rows::<3>(F),
            quat_boxplus(&x.3, &d.fixed_rows::<3>(TH).into_owned()),
            x.4 + d.fixed_rows::<3>(BA),
            x.5 + d.fixed_rows::<3>(BW),
        )
    }

    fn minus(x: &State, y: &State) -> SVector<f64, 18> {
        let mut d = SVector::<f64, 18>::zeros();
        d.fixed_rows_mut::<3>(A).copy_from(&(x.0 - y.0));
        d.fixed_rows_mut::<3>(B).copy_from(&(x.1 - y.1));
        d.fixed_rows_mut::<3>(F).copy_from(&(x.2 - y.2));
        d.fixed_rows_mut::<3>(TH).copy_from(&quat_boxminus(&x.3, &y.3));
        d.fixed_rows_mut::<3>(BA).copy_from(&(x.4 - y.4));
        d.fixed_rows_mut::<3>(BW).copy_from(&(x.5 - y.5));
        d
    }

    fn v3() -> impl Strategy<Value = Vector3<f64>> {
        (-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64).prop_map(|(a, b, c)| Vector3::new(a, b, c))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn transition_matches_finite_differences(
            alpha in v3(), beta in v3(), fsum in v3(), rv in v3(),
            ba in v3(), bw in v3(), acc in v3(), acc1 in v3(), gyro in v3(), tz in 5.0..15.0f64,
            dt in 0.001..0.05f64,
        ) {
            let mut block = DynPreintegration::new(ba * 0.1, bw * 0.1, ProcessNoise::zero());
            block.alpha = alpha;
            block.beta = beta;
            block.fsum = fsum;
            block.gamma = UnitQuaternion::from_scaled_axis(rv * 0.5);
            let s0 = FusedSample { t: 0.0, accel: acc + Vector3::new(0.0, 0.0, tz), gyro, thrust: Vector3::new(0.1, -0.2, tz) };
            let s1 = FusedSample { t: dt, accel: acc1 + Vector3::new(0.0, 0.0, tz), gyro: -gyro, thrust: Vector3::new(0.0, 0.3, tz + 1.0) };
            let (f, g) = block.transition(&s0, &s1);
            let x0: State = (alpha, beta, fsum, block.gamma, block.lin_ba, block.lin_bw);
            let zero_n = SVector::<f64, 15>::zeros();
            let base = step(&x0, &s0, &s1, &zero_n);
            let h = 1e-6;
            for k in 0..18 {
                let mut d = SVector::<f64, 18>::zeros();
                d[k] = h;
                let col = (minus(&step(&plus(&x0, &d), &s0, &s1, &zero_n), &base)
                    - minus(&step(&plus(&x0, &(-d)), &s0, &s1, &zero_n), &base)) / (2.0 * h);
                let err = (col - f.column(k)).norm();
                prop_assert!(err <= 1e-6 * (1.0 + f.column(k).norm()), "F col {k}: {err}");
            }
            for k in 0..15 {
                let mut n = SVector::<f64, 15>::zeros();
                n[k] = h;
                let col = (minus(&step(&x0, &s0, &s1, &n), &base) - minus(&step(&x0, &s0, &s1, &(-n)), &base)) / (2.0 * h);
                let err = (col - g.column(k)).norm();
                prop_assert!(err <= 1e-6 * (1.0 + g.column(k).norm()), "G col {k}: {err}");
            }
        }

        #[test]
        fn covariance_stays_symmetric_psd(gyros in proptest::collection::vec(v3(), 20..60)) {
            let noise = ProcessNoise { sigma_a: 0.02, sigma_w: 0.002, sigma_t: 0.1, sigma_ba: 1e-4, sigma_bw: 1e-5 };
            let mut b = DynPreintegration::new(Vector3::zeros(), Vector3::zeros(), noise);
            for w in &gyros {
                b.push(&FusedSample { gyro: *w, ..sample(9.79, 10.0) }, 0.0025).unwrap();
                let p = b.full_covariance();
                prop_assert!((p - p.transpose()).norm() == 0.0);
                prop_assert!(p.symmetric_eigenvalues().min() >= -1e-10);
                prop_assert!((b.gamma().quaternion().norm() - 1.0).abs() < 1e-9);
            }
            b.finalize().unwrap();
            prop_assert!(b.covariance().symmetric_eigenvalues().min() >= -1e-10);
            prop_assert!(b.jacobian().iter().all(|v| v.is_finite()));
        }
    }
}
