use nalgebra::{Matrix3, SMatrix, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{increment_jacobian, quat_increment, skew};

use super::{FusedSample, ProcessNoise};

pub const IMU_ERR_DIM: usize = 15;

// Error state [δp, δθ, δv, δb_a, δb_g].
pub(crate) const P: usize = 0;
pub(crate) const TH: usize = 3;
pub(crate) const V: usize = 6;
pub(crate) const BA: usize = 9;
pub(crate) const BG: usize = 12;

// Noise [n_a, n_g, n_ba, n_bg].
const N_A: usize = 0;
const N_G: usize = 3;
const N_BA: usize = 6;
const N_BG: usize = 9;

pub type Mat15 = SMatrix<f64, IMU_ERR_DIM, IMU_ERR_DIM>;
type Noise15 = SMatrix<f64, IMU_ERR_DIM, 12>;

/// Standard mid-point inertial preintegration between two keyframes.
#[derive(Debug, Clone, PartialEq)]
pub struct ImuPreintegration {
    dp: Vector3<f64>,
    dv: Vector3<f64>,
    dq: UnitQuaternion<f64>,
    dt_total: f64,
    cov: Mat15,
    jac: Mat15,
    lin_ba: Vector3<f64>,
    lin_bg: Vector3<f64>,
    noise: ProcessNoise,
    nodes: Vec<FusedSample>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuCorrected {
    pub dp: Vector3<f64>,
    pub dv: Vector3<f64>,
    pub dq: UnitQuaternion<f64>,
}

impl ImuPreintegration {
    /// Integrates consecutive sample pairs of `nodes` with the mid-point rule.
    pub fn from_nodes(
        nodes: &[FusedSample],
        lin_ba: Vector3<f64>,
        lin_bg: Vector3<f64>,
        noise: ProcessNoise,
    ) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::invalid("inertial preintegration over an empty interval"));
        }
        let mut out = Self {
            dp: Vector3::zeros(),
            dv: Vector3::zeros(),
            dq: UnitQuaternion::identity(),
            dt_total: 0.0,
            cov: Mat15::zeros(),
            jac: Mat15::identity(),
            lin_ba,
            lin_bg,
            noise,
            nodes: nodes.to_vec(),
        };
        for w in nodes.windows(2) {
            out.step(&w[0], &w[1])?;
        }
        Ok(out)
    }

    pub fn dp(&self) -> Vector3<f64> {
        self.dp
    }

    pub fn dv(&self) -> Vector3<f64> {
        self.dv
    }

    pub fn dq(&self) -> UnitQuaternion<f64> {
        self.dq
    }

    pub fn dt_total(&self) -> f64 {
        self.dt_total
    }

    pub fn lin_ba(&self) -> Vector3<f64> {
        self.lin_ba
    }

    pub fn lin_bg(&self) -> Vector3<f64> {
        self.lin_bg
    }

    /// Covariance over `[δp, δθ, δv, δb_a, δb_g]`.
    pub fn covariance(&self) -> &Mat15 {
        &self.cov
    }

    pub fn jacobian(&self) -> &Mat15 {
        &self.jac
    }

    pub(crate) fn jac_block(&self, row: usize, col: usize) -> Matrix3<f64> {
        self.jac.fixed_view::<3, 3>(row, col).into_owned()
    }

    fn step(&mut self, s0: &FusedSample, s1: &FusedSample) -> Result<()> {
        let dt = s1.t - s0.t;
        if !(dt > 0.0 && dt < 0.1) || !s0.is_finite() || !s1.is_finite() {
            return Err(Error::invalid(format!("bad inertial step dt = {dt}")));
        }
        let w = 0.5 * (s0.gyro + s1.gyro) - self.lin_bg;
        let theta = w * dt;
        let inc = quat_increment(&theta);
        let dr = inc.to_rotation_matrix().into_inner();
        let jinc = increment_jacobian(&theta);
        let r0 = self.dq.to_rotation_matrix().into_inner();
        let r1 = r0 * dr;
        let a0 = s0.accel - self.lin_ba;
        let a1 = s1.accel - self.lin_ba;
        let un = 0.5 * (r0 * a0 + r1 * a1);

        let u_th = -0.5 * (r0 * skew(&a0) + r1 * skew(&a1) * dr.transpose());
        let u_ba = -0.5 * (r0 + r1);
        let u_bg = 0.5 * r1 * skew(&a1) * jinc * dt;
        let i3 = Matrix3::identity();
        let h = 0.5 * dt * dt;

        let mut f = Mat15::identity();
        f.fixed_view_mut::<3, 3>(P, TH).copy_from(&(h * u_th));
        f.fixed_view_mut::<3, 3>(P, V).copy_from(&(i3 * dt));
        f.fixed_view_mut::<3, 3>(P, BA).copy_from(&(h * u_ba));
        f.fixed_view_mut::<3, 3>(P, BG).copy_from(&(h * u_bg));
        f.fixed_view_mut::<3, 3>(TH, TH).copy_from(&dr.transpose());
        f.fixed_view_mut::<3, 3>(TH, BG).copy_from(&(-jinc * dt));
        f.fixed_view_mut::<3, 3>(V, TH).copy_from(&(dt * u_th));
        f.fixed_view_mut::<3, 3>(V, BA).copy_from(&(dt * u_ba));
        f.fixed_view_mut::<3, 3>(V, BG).copy_from(&(dt * u_bg));

        let mut g = Noise15::zeros();
        g.fixed_view_mut::<3, 3>(P, N_A).copy_from(&(h * u_ba));
        g.fixed_view_mut::<3, 3>(V, N_A).copy_from(&(dt * u_ba));
        g.fixed_view_mut::<3, 3>(P, N_G).copy_from(&(h * u_bg));
        g.fixed_view_mut::<3, 3>(TH, N_G).copy_from(&(-jinc * dt));
        g.fixed_view_mut::<3, 3>(V, N_G).copy_from(&(dt * u_bg));
        g.fixed_view_mut::<3, 3>(BA, N_BA).copy_from(&i3);
        g.fixed_view_mut::<3, 3>(BG, N_BG).copy_from(&i3);

        let n = &self.noise;
        let mut q = SMatrix::<f64, 12, 12>::zeros();
        for (k, v) in [
            (N_A, n.sigma_a.powi(2)),
            (N_G, n.sigma_w.powi(2)),
            (N_BA, n.sigma_ba.powi(2) * dt),
            (N_BG, n.sigma_bw.powi(2) * dt),
        ] {
            for i in 0..3 {
                q[(k + i, k + i)] = v;
            }
        }
        let p = f * self.cov * f.transpose() + g * q * g.transpose();
        self.cov = 0.5 * (p + p.transpose());
        self.jac = f * self.jac;

        self.dp += self.dv * dt + 0.5 * un * dt * dt;
        self.dv += un * dt;
        self.dq = UnitQuaternion::new_normalize((self.dq * inc).into_inner());
        self.dt_total += dt;
        Ok(())
    }

    /// First-order bias correction of the preintegrated terms.
    pub fn correct_bias(&self, ba: &Vector3<f64>, bg: &Vector3<f64>) -> ImuCorrected {
        let dba = ba - self.lin_ba;
        let dbg = bg - self.lin_bg;
        let j = |r, c| self.jac_block(r, c);
        ImuCorrected {
            dp: self.dp + j(P, BA) * dba + j(P, BG) * dbg,
            dv: self.dv + j(V, BA) * dba + j(V, BG) * dbg,
            dq: self.dq * UnitQuaternion::from_scaled_axis(j(TH, BG) * dbg),
        }
    }

    pub fn repropagate(&self, ba: Vector3<f64>, bg: Vector3<f64>) -> Result<Self> {
        Self::from_nodes(&self.nodes, ba, bg, self.noise)
    }
}
