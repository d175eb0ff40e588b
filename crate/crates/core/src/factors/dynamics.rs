use std::str::FromStr;

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{gravity, skew};
use crate::preint::DynPreintegration;

use super::{sqrt_information, NavState, SBA, SBG, SF, SP, SQ, STATE_DIM, SV};

pub type Jac<const R: usize> = SMatrix<f64, R, STATE_DIM>;

/// Which keyframe's force variable the interval `[t_k, t_{k+1}]` uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ForceIndex {
    /// The interval's owning keyframe `x_k`.
    #[default]
    #[serde(rename = "k")]
    Current,
    /// The literal `x_{k+1}` reading.
    #[serde(rename = "k+1")]
    Next,
}

impl FromStr for ForceIndex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "k" => Ok(Self::Current),
            "k+1" => Ok(Self::Next),
            other => Err(Error::invalid(format!(
                "force index must be 'k' or 'k+1', got '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicsResidual {
    /// `[δα, δβ, δF, δb_a]`.
    pub r: SVector<f64, 12>,
    /// Information matrix `W`.
    pub info: SMatrix<f64, 12, 12>,
}

const DYN_ROWS: [usize; 12] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11];
const VIMO_ROWS: [usize; 9] = [0, 1, 2, 3, 4, 5, 9, 10, 11];

fn sub_cov<const N: usize>(block: &DynPreintegration, rows: &[usize; N]) -> SMatrix<f64, N, N> {
    let p = block.covariance();
    SMatrix::<f64, N, N>::from_fn(|i, j| p[(rows[i], rows[j])])
}

fn inverse<const N: usize>(cov: &SMatrix<f64, N, N>, what: &str) -> SMatrix<f64, N, N> {
    let s = sqrt_information(cov, what);
    let w = s.transpose() * s;
    0.5 * (w + w.transpose())
}

/// Covariance of the 12 residual rows: the `[δα, δβ, δF, δb_a]` block of `P`.
pub fn dynamics_covariance(block: &DynPreintegration) -> SMatrix<f64, 12, 12> {
    sub_cov(block, &DYN_ROWS)
}

pub fn dynamics_information(block: &DynPreintegration) -> SMatrix<f64, 12, 12> {
    inverse(&dynamics_covariance(block), "dynamics factor")
}

/// Covariance of the `[δα, δβ, δb_a]` rows used when the force row is
/// replaced by a zero-mean prior.
pub fn vimo_covariance(block: &DynPreintegration) -> SMatrix<f64, 9, 9> {
    sub_cov(block, &VIMO_ROWS)
}

pub fn vimo_information(block: &DynPreintegration) -> SMatrix<f64, 9, 9> {
    inverse(&vimo_covariance(block), "dynamics factor")
}

fn force(xk: &NavState, xk1: &NavState, idx: ForceIndex) -> Vector3<f64> {
    match idx {
        ForceIndex::Current => xk.f,
        ForceIndex::Next => xk1.f,
    }
}

struct Parts {
    alpha: Vector3<f64>,
    beta: Vector3<f64>,
    dp: Vector3<f64>,
    dv: Vector3<f64>,
    f: Vector3<f64>,
    favg: Vector3<f64>,
    dt: f64,
}

fn parts(xk: &NavState, xk1: &NavState, block: &DynPreintegration, idx: ForceIndex) -> Result<Parts> {
    let c = block.correct_bias(&xk.ba, &xk.bg)?;
    let dt = block.dt_total();
    let g = gravity();
    let rt = xk.q.inverse();
    Ok(Parts {
        alpha: c.alpha,
        beta: c.beta,
        dp: rt * (xk1.p - xk.p - xk.v * dt - 0.5 * g * dt * dt),
        dv: rt * (xk1.v - xk.v - g * dt),
        f: force(xk, xk1, idx),
        favg: c.favg,
        dt,
    })
}

/// The 12-row dynamics/external-force residual between `x_k` and `x_{k+1}`.
pub fn dynamics_residual(
    xk: &NavState,
    xk1: &NavState,
    block: &DynPreintegration,
    idx: ForceIndex,
) -> Result<DynamicsResidual> {
    let p = parts(xk, xk1, block, idx)?;
    let mut r = SVector::<f64, 12>::zeros();
    r.fixed_rows_mut::<3>(0)
        .copy_from(&(p.dp - 0.5 * p.f * p.dt * p.dt - p.alpha));
    r.fixed_rows_mut::<3>(3).copy_from(&(p.dv - p.f * p.dt - p.beta));
    r.fixed_rows_mut::<3>(6).copy_from(&(p.f - p.favg));
    r.fixed_rows_mut::<3>(9).copy_from(&(xk1.ba - xk.ba));
    Ok(DynamicsResidual {
        r,
        info: dynamics_information(block),
    })
}

/// Jacobians of [`dynamics_residual`] w.r.t. the tangents of `x_k` and `x_{k+1}`.
pub fn dynamics_jacobians(
    xk: &NavState,
    xk1: &NavState,
    block: &DynPreintegration,
    idx: ForceIndex,
) -> Result<(Jac<12>, Jac<12>)> {
    let p = parts(xk, xk1, block, idx)?;
    let (ja_bw, jb_bw, jf_ba, jf_bw) = block.bias_jacobians();
    let rt = xk.q.inverse().to_rotation_matrix().into_inner();
    let i3 = Matrix3::<f64>::identity();
    let dt = p.dt;
    let mut ji = Jac::<12>::zeros();
    let mut jj = Jac::<12>::zeros();

    ji.fixed_view_mut::<3, 3>(0, SP).copy_from(&-rt);
    ji.fixed_view_mut::<3, 3>(0, SQ).copy_from(&skew(&p.dp));
    ji.fixed_view_mut::<3, 3>(0, SV).copy_from(&(-rt * dt));
    ji.fixed_view_mut::<3, 3>(0, SBG).copy_from(&-ja_bw);
    jj.fixed_view_mut::<3, 3>(0, SP).copy_from(&rt);

    ji.fixed_view_mut::<3, 3>(3, SQ).copy_from(&skew(&p.dv));
    ji.fixed_view_mut::<3, 3>(3, SV).copy_from(&-rt);
    ji.fixed_view_mut::<3, 3>(3, SBG).copy_from(&-jb_bw);
    jj.fixed_view_mut::<3, 3>(3, SV).copy_from(&rt);

    ji.fixed_view_mut::<3, 3>(6, SBA).copy_from(&-jf_ba);
    ji.fixed_view_mut::<3, 3>(6, SBG).copy_from(&-jf_bw);

    ji.fixed_view_mut::<3, 3>(9, SBA).copy_from(&-i3);
    jj.fixed_view_mut::<3, 3>(9, SBA).copy_from(&i3);

    let jf = match idx {
        ForceIndex::Current => &mut ji,
        ForceIndex::Next => &mut jj,
    };
    jf.fixed_view_mut::<3, 3>(0, SF).copy_from(&(-0.5 * dt * dt * i3));
    jf.fixed_view_mut::<3, 3>(3, SF).copy_from(&(-dt * i3));
    jf.fixed_view_mut::<3, 3>(6, SF).copy_from(&i3);
    Ok((ji, jj))
}

fn select<const N: usize>(rows: &[usize; N], r: &SVector<f64, 12>) -> SVector<f64, N> {
    SVector::<f64, N>::from_fn(|i, _| r[rows[i]])
}

fn select_rows<const N: usize>(rows: &[usize; N], j: &Jac<12>) -> Jac<N> {
    Jac::<N>::from_fn(|i, k| j[(rows[i], k)])
}

/// Dynamics residual with the force row removed: `[δα, δβ, δb_a]`.
pub fn vimo_residual(
    xk: &NavState,
    xk1: &NavState,
    block: &DynPreintegration,
    idx: ForceIndex,
) -> Result<SVector<f64, 9>> {
    Ok(select(&VIMO_ROWS, &dynamics_residual(xk, xk1, block, idx)?.r))
}

pub fn vimo_jacobians(
    xk: &NavState,
    xk1: &NavState,
    block: &DynPreintegration,
    idx: ForceIndex,
) -> Result<(Jac<9>, Jac<9>)> {
    let (ji, jj) = dynamics_jacobians(xk, xk1, block, idx)?;
    Ok((select_rows(&VIMO_ROWS, &ji), select_rows(&VIMO_ROWS, &jj)))
}

/// Whitened zero-mean force prior `F / σ` and its Jacobian.
pub fn force_prior(x: &NavState, sigma: f64) -> (Vector3<f64>, Jac<3>) {
    let mut j = Jac::<3>::zeros();
    j.fixed_view_mut::<3, 3>(0, SF)
        .copy_from(&(Matrix3::identity() / sigma));
    (x.f / sigma, j)
}
