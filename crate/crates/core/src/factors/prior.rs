use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::right_jacobian_inv;

use super::{NavState, StateVec, SQ, STATE_DIM};

/// Eigenvalues below this (relative to unit-scaled information) are treated as zero.
pub const EIGEN_FLOOR: f64 = 1e-10;

/// Linear Gaussian prior `‖r0 + J_p·(x ⊟ x̄)‖²` on the oldest `lin.len()`
/// states of the window.
#[derive(Debug, Clone, PartialEq)]
pub struct MargPrior {
    pub lin: Vec<NavState>,
    pub jp: DMatrix<f64>,
    pub r0: DVector<f64>,
}

impl Default for MargPrior {
    fn default() -> Self {
        Self::empty()
    }
}

impl MargPrior {
    pub fn empty() -> Self {
        Self {
            lin: Vec::new(),
            jp: DMatrix::zeros(0, 0),
            r0: DVector::zeros(0),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.lin.is_empty() || self.r0.is_empty()
    }

    pub fn num_states(&self) -> usize {
        self.lin.len()
    }

    /// Independent per-coordinate prior centred on `x` with std-devs `sigmas`
    /// (non-positive entries leave that coordinate free).
    pub fn diagonal(x: NavState, sigmas: &StateVec) -> Self {
        let rows: Vec<usize> = (0..STATE_DIM).filter(|&i| sigmas[i] > 0.0).collect();
        let mut jp = DMatrix::zeros(rows.len(), STATE_DIM);
        for (k, &i) in rows.iter().enumerate() {
            jp[(k, i)] = 1.0 / sigmas[i];
        }
        Self {
            lin: vec![x],
            jp,
            r0: DVector::zeros(rows.len()),
        }
    }

    /// Converts a Gauss-Newton system `(H, g)` at `lin` (cost `2gᵀdx + dxᵀH dx`
    /// up to a constant) into square-root form.
    pub fn from_information(lin: Vec<NavState>, h: &DMatrix<f64>, g: &DVector<f64>) -> Result<Self> {
        let n = lin.len() * STATE_DIM;
        if h.nrows() != n || h.ncols() != n || g.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: h.nrows(),
            });
        }
        let active: Vec<usize> = (0..n).filter(|&i| h[(i, i)] > 0.0).collect();
        let m = active.len();
        if m == 0 {
            return Ok(Self {
                lin,
                jp: DMatrix::zeros(0, n),
                r0: DVector::zeros(0),
            });
        }
        // Jacobi scaling keeps the factorization well conditioned when strong
        // and weak constraints are mixed.
        let s = DVector::from_iterator(m, active.iter().map(|&i| h[(i, i)].sqrt()));
        let hs = DMatrix::from_fn(m, m, |a, b| h[(active[a], active[b])] / (s[a] * s[b]));
        let hs = 0.5 * (&hs + hs.transpose());
        let gs = DVector::from_fn(m, |a, _| g[active[a]] / s[a]);

        // Square root `A` with `Aᵀ A = Ĥ`.
        let (a, r0) = match hs.clone().cholesky() {
            Some(ch) if ch.l().diagonal().iter().all(|d| *d > EIGEN_FLOOR.sqrt()) => {
                let l = ch.l();
                let r0 = l.solve_lower_triangular(&gs).expect("nonsingular cholesky factor");
                (l.transpose(), r0)
            }
            _ => {
                let eig = hs.symmetric_eigen();
                let min = eig.eigenvalues.min();
                if min < -EIGEN_FLOOR {
                    log::warn!("marginalization: indefinite information (min eigenvalue {min:.3e}), flooring");
                }
                let keep: Vec<usize> = (0..m).filter(|&k| eig.eigenvalues[k] > EIGEN_FLOOR).collect();
                let mut a = DMatrix::zeros(keep.len(), m);
                let mut r0 = DVector::zeros(keep.len());
                for (row, &k) in keep.iter().enumerate() {
                    let lam = eig.eigenvalues[k];
                    let v = eig.eigenvectors.column(k);
                    a.row_mut(row).copy_from(&(v.transpose() * lam.sqrt()));
                    r0[row] = v.dot(&gs) / lam.sqrt();
                }
                (a, r0)
            }
        };
        let mut jp = DMatrix::zeros(a.nrows(), n);
        for (b, &col) in active.iter().enumerate() {
            for r in 0..a.nrows() {
                jp[(r, col)] = a[(r, b)] * s[b];
            }
        }
        Ok(Self { lin, jp, r0 })
    }
}

/// Prior residual and its Jacobian w.r.t. the tangents of `states`.
pub fn prior_residual(prior: &MargPrior, states: &[NavState]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if prior.is_empty() {
        return Ok((DVector::zeros(0), DMatrix::zeros(0, states.len() * STATE_DIM)));
    }
    if states.len() != prior.lin.len() {
        return Err(Error::DimensionMismatch {
            expected: prior.lin.len(),
            got: states.len(),
        });
    }
    let n = states.len() * STATE_DIM;
    let mut dx = DVector::zeros(n);
    let mut j = prior.jp.clone();
    for (k, (x, xl)) in states.iter().zip(&prior.lin).enumerate() {
        let d = x.boxminus(xl);
        dx.rows_mut(k * STATE_DIM, STATE_DIM).copy_from(&d);
        let jri = right_jacobian_inv(&d.fixed_rows::<3>(SQ).into_owned());
        let c = k * STATE_DIM + SQ;
        let cols = prior.jp.columns(c, 3) * jri;
        j.columns_mut(c, 3).copy_from(&cols);
    }
    Ok((&prior.r0 + &prior.jp * dx, j))
}

/// Eliminates the first `m` variables of the system `(H, g)` by Schur
/// complement, using an eigenvalue-floored pseudo-inverse of `H_mm`.
pub fn schur_marginalize(h: &DMatrix<f64>, g: &DVector<f64>, m: usize) -> (DMatrix<f64>, DVector<f64>) {
    let n = h.nrows();
    let hmm = h.view((0, 0), (m, m)).into_owned();
    let hmm = 0.5 * (&hmm + hmm.transpose());
    let hmk = h.view((0, m), (m, n - m));
    let hkk = h.view((m, m), (n - m, n - m));
    let eig = hmm.symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(1.0);
    if eig.eigenvalues.min() < -EIGEN_FLOOR * scale {
        log::warn!(
            "marginalization: indefinite block (min eigenvalue {:.3e}), flooring at {EIGEN_FLOOR:e}",
            eig.eigenvalues.min()
        );
    }
    let inv_vals = eig
        .eigenvalues
        .map(|v| if v > EIGEN_FLOOR * scale { 1.0 / v } else { 0.0 });
    let pinv = &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
    let tmp = hmk.transpose() * &pinv;
    let hp = hkk - &tmp * hmk;
    let gp = g.rows(m, n - m) - &tmp * g.rows(0, m);
    (0.5 * (&hp + hp.transpose()), gp)
}
