//! Residuals and analytic Jacobians of the cost terms: marginalization
//! prior, inertial, visual reprojection and the dynamics/external-force term.

mod dynamics;
mod inertial;
mod prior;
mod visual;

use nalgebra::{DMatrix, SMatrix, SVector, UnitQuaternion, Vector3};

use crate::geometry::{quat_boxminus, quat_boxplus};

pub use dynamics::{
    dynamics_covariance, dynamics_information, dynamics_jacobians, dynamics_residual, force_prior, vimo_covariance,
    vimo_information, vimo_jacobians, vimo_residual, DynamicsResidual, ForceIndex,
};
pub use inertial::{inertial_information, inertial_jacobians, inertial_residual};
pub use prior::{prior_residual, schur_marginalize, MargPrior, EIGEN_FLOOR};
pub use visual::{huber, visual_residual, FeatureState, VisualEval};

/// Tangent dimension of a [`NavState`]: `[δp, δθ, δv, δb_a, δb_ω, δF]`.
pub const STATE_DIM: usize = 18;
pub const SP: usize = 0;
pub const SQ: usize = 3;
pub const SV: usize = 6;
pub const SBA: usize = 9;
pub const SBG: usize = 12;
pub const SF: usize = 15;

pub type StateVec = SVector<f64, STATE_DIM>;

/// Per-keyframe body state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavState {
    pub t: f64,
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub q: UnitQuaternion<f64>,
    pub ba: Vector3<f64>,
    pub bg: Vector3<f64>,
    /// Mean mass-normalized external force over `[t_k, t_{k+1}]`, body frame of `b_k`.
    pub f: Vector3<f64>,
}

impl NavState {
    pub fn identity(t: f64) -> Self {
        Self {
            t,
            p: Vector3::zeros(),
            v: Vector3::zeros(),
            q: UnitQuaternion::identity(),
            ba: Vector3::zeros(),
            bg: Vector3::zeros(),
            f: Vector3::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.p, self.v, self.ba, self.bg, self.f]
            .iter()
            .all(|x| x.iter().all(|v| v.is_finite()))
            && self.q.coords.iter().all(|v| v.is_finite())
    }

    /// Applies a tangent update; rotation is perturbed on the right.
    pub fn boxplus(&self, d: &StateVec) -> Self {
        Self {
            t: self.t,
            p: self.p + d.fixed_rows::<3>(SP),
            v: self.v + d.fixed_rows::<3>(SV),
            q: quat_boxplus(&self.q, &d.fixed_rows::<3>(SQ).into_owned()),
            ba: self.ba + d.fixed_rows::<3>(SBA),
            bg: self.bg + d.fixed_rows::<3>(SBG),
            f: self.f + d.fixed_rows::<3>(SF),
        }
    }

    /// Tangent difference `self ⊟ other`.
    pub fn boxminus(&self, other: &Self) -> StateVec {
        let mut d = StateVec::zeros();
        d.fixed_rows_mut::<3>(SP).copy_from(&(self.p - other.p));
        d.fixed_rows_mut::<3>(SQ).copy_from(&quat_boxminus(&self.q, &other.q));
        d.fixed_rows_mut::<3>(SV).copy_from(&(self.v - other.v));
        d.fixed_rows_mut::<3>(SBA).copy_from(&(self.ba - other.ba));
        d.fixed_rows_mut::<3>(SBG).copy_from(&(self.bg - other.bg));
        d.fixed_rows_mut::<3>(SF).copy_from(&(self.f - other.f));
        d
    }
}

/// Upper-triangular-free square root of an information matrix given the
/// covariance: returns `L⁻¹` with `L Lᵀ = cov`, so `‖L⁻¹ r‖² = rᵀ cov⁻¹ r`.
/// A singular covariance is regularized with `1e-12·I` and a warning.
pub fn sqrt_information<const N: usize>(cov: &SMatrix<f64, N, N>, what: &str) -> SMatrix<f64, N, N> {
    let sym = 0.5 * (cov + cov.transpose());
    let chol = match sym.cholesky() {
        Some(c) => c,
        None => {
            log::warn!("{what}: singular covariance, regularizing with 1e-12*I");
            let reg = sym + SMatrix::<f64, N, N>::identity() * 1e-12;
            match reg.cholesky() {
                Some(c) => c,
                None => {
                    // Indefinite beyond the regularization: floor the spectrum.
                    let eig = DMatrix::from_column_slice(N, N, reg.as_slice()).symmetric_eigen();
                    let vals = eig.eigenvalues.map(|v| v.max(1e-12));
                    let fixed = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
                    SMatrix::<f64, N, N>::from_column_slice(fixed.as_slice())
                        .cholesky()
                        .expect("floored spectrum is positive definite")
                }
            }
        }
    };
    let l = chol.l();
    l.solve_lower_triangular(&SMatrix::<f64, N, N>::identity())
        .expect("cholesky factor is invertible")
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use proptest::prelude::*;

    pub fn v3(scale: f64) -> impl Strategy<Value = Vector3<f64>> {
        (-scale..scale, -scale..scale, -scale..scale).prop_map(|(a, b, c)| Vector3::new(a, b, c))
    }

    pub fn nav_state() -> impl Strategy<Value = NavState> {
        (v3(5.0), v3(2.0), v3(1.2), v3(0.2), v3(0.05), v3(3.0)).prop_map(|(p, v, r, ba, bg, f)| NavState {
            t: 0.0,
            p,
            v,
            q: UnitQuaternion::from_scaled_axis(r),
            ba,
            bg,
            f,
        })
    }

    /// Central-difference Jacobian of `f` w.r.t. the tangent of `x`.
    pub fn numeric_jacobian<const R: usize>(
        x: &NavState,
        f: impl Fn(&NavState) -> SVector<f64, R>,
    ) -> SMatrix<f64, R, STATE_DIM> {
        let h = 1e-6;
        let mut j = SMatrix::<f64, R, STATE_DIM>::zeros();
        for k in 0..STATE_DIM {
            let mut d = StateVec::zeros();
            d[k] = h;
            let col = (f(&x.boxplus(&d)) - f(&x.boxplus(&(-d)))) / (2.0 * h);
            j.set_column(k, &col);
        }
        j
    }

    /// Relative Frobenius closeness with an absolute floor for all-zero blocks.
    pub fn close<const R: usize, const C: usize>(a: &SMatrix<f64, R, C>, n: &SMatrix<f64, R, C>) -> bool {
        (a - n).norm() <= 1e-4 * n.norm() + 1e-7
    }
}
