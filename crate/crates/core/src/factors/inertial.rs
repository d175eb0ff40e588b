use nalgebra::{Matrix3, SMatrix, SVector, UnitQuaternion};

use crate::geometry::{gravity, right_jacobian, right_jacobian_inv, skew};
use crate::preint::inertial::{BA, BG, P as IP, TH as ITH, V as IV};
use crate::preint::ImuPreintegration;

use super::dynamics::Jac;
use super::{sqrt_information, NavState, SBA, SBG, SP, SQ, SV};

/// Inertial residual `[δp, δθ, δv, δb_a, δb_g]` between consecutive keyframes.
pub fn inertial_residual(xi: &NavState, xj: &NavState, block: &ImuPreintegration) -> SVector<f64, 15> {
    let c = block.correct_bias(&xi.ba, &xi.bg);
    let dt = block.dt_total();
    let g = gravity();
    let rt = xi.q.inverse();
    let mut r = SVector::<f64, 15>::zeros();
    r.fixed_rows_mut::<3>(IP)
        .copy_from(&(rt * (xj.p - xi.p - xi.v * dt - 0.5 * g * dt * dt) - c.dp));
    r.fixed_rows_mut::<3>(ITH)
        .copy_from(&(c.dq.inverse() * xi.q.inverse() * xj.q).scaled_axis());
    r.fixed_rows_mut::<3>(IV)
        .copy_from(&(rt * (xj.v - xi.v - g * dt) - c.dv));
    r.fixed_rows_mut::<3>(BA).copy_from(&(xj.ba - xi.ba));
    r.fixed_rows_mut::<3>(BG).copy_from(&(xj.bg - xi.bg));
    r
}

pub fn inertial_jacobians(xi: &NavState, xj: &NavState, block: &ImuPreintegration) -> (Jac<15>, Jac<15>) {
    let dt = block.dt_total();
    let g = gravity();
    let rt = xi.q.inverse().to_rotation_matrix().into_inner();
    let dp = rt * (xj.p - xi.p - xi.v * dt - 0.5 * g * dt * dt);
    let dv = rt * (xj.v - xi.v - g * dt);
    let c = block.correct_bias(&xi.ba, &xi.bg);
    let e: UnitQuaternion<f64> = c.dq.inverse() * xi.q.inverse() * xj.q;
    let r_th = e.scaled_axis();
    let jr_inv = right_jacobian_inv(&r_th);
    let em = e.to_rotation_matrix().into_inner();
    let j_th_bg = block.jac_block(ITH, BG);
    let phi = j_th_bg * (xi.bg - block.lin_bg());
    let i3 = Matrix3::<f64>::identity();

    let mut ji = Jac::<15>::zeros();
    let mut jj = Jac::<15>::zeros();
    ji.fixed_view_mut::<3, 3>(IP, SP).copy_from(&-rt);
    ji.fixed_view_mut::<3, 3>(IP, SQ).copy_from(&skew(&dp));
    ji.fixed_view_mut::<3, 3>(IP, SV).copy_from(&(-rt * dt));
    ji.fixed_view_mut::<3, 3>(IP, SBA).copy_from(&-block.jac_block(IP, BA));
    ji.fixed_view_mut::<3, 3>(IP, SBG).copy_from(&-block.jac_block(IP, BG));
    jj.fixed_view_mut::<3, 3>(IP, SP).copy_from(&rt);

    let rj_t_ri = (xj.q.inverse() * xi.q).to_rotation_matrix().into_inner();
    ji.fixed_view_mut::<3, 3>(ITH, SQ).copy_from(&(-jr_inv * rj_t_ri));
    ji.fixed_view_mut::<3, 3>(ITH, SBG)
        .copy_from(&(-jr_inv * em.transpose() * right_jacobian(&phi) * j_th_bg));
    jj.fixed_view_mut::<3, 3>(ITH, SQ).copy_from(&jr_inv);

    ji.fixed_view_mut::<3, 3>(IV, SQ).copy_from(&skew(&dv));
    ji.fixed_view_mut::<3, 3>(IV, SV).copy_from(&-rt);
    ji.fixed_view_mut::<3, 3>(IV, SBA).copy_from(&-block.jac_block(IV, BA));
    ji.fixed_view_mut::<3, 3>(IV, SBG).copy_from(&-block.jac_block(IV, BG));
    jj.fixed_view_mut::<3, 3>(IV, SV).copy_from(&rt);

    ji.fixed_view_mut::<3, 3>(BA, SBA).copy_from(&-i3);
    jj.fixed_view_mut::<3, 3>(BA, SBA).copy_from(&i3);
    ji.fixed_view_mut::<3, 3>(BG, SBG).copy_from(&-i3);
    jj.fixed_view_mut::<3, 3>(BG, SBG).copy_from(&i3);
    (ji, jj)
}

/// Information matrix of the inertial residual (inverse propagated covariance).
pub fn inertial_information(block: &ImuPreintegration) -> SMatrix<f64, 15, 15> {
    let s = sqrt_information(block.covariance(), "inertial factor");
    let w = s.transpose() * s;
    0.5 * (w + w.transpose())
}
