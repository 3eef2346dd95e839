//! Dense least-squares helpers shared by the WLS and lasso code.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative tolerance on |R_ii| against the largest column norm.
pub(crate) const RANK_TOL: f64 = 1e-10;

/// Weighted least squares via Householder QR of the row-scaled design.
///
/// Columns are checked in order; a column whose R diagonal falls below
/// `RANK_TOL` times the largest column norm lies in the span of the columns
/// before it and is reported by name.
pub(crate) fn weighted_lstsq(
    x: DMatrix<f64>,
    y: &[f64],
    w: &[f64],
    names: &[String],
) -> Result<DVector<f64>> {
    let (n, k) = x.shape();
    debug_assert_eq!(y.len(), n);
    debug_assert_eq!(w.len(), n);
    let mut xs = x;
    let mut ys = DVector::zeros(n);
    for i in 0..n {
        let s = w[i].sqrt();
        for c in 0..k {
            xs[(i, c)] *= s;
        }
        ys[i] = y[i] * s;
    }
    let max_norm = (0..k).map(|c| xs.column(c).norm()).fold(0.0_f64, f64::max);
    if k > n {
        return Err(Error::RankDeficient(names[n].clone()));
    }
    let qr = xs.qr();
    let r = qr.r();
    for c in 0..k {
        if !(r[(c, c)].abs() > RANK_TOL * max_norm) {
            return Err(Error::RankDeficient(names[c].clone()));
        }
    }
    qr.q_tr_mul(&mut ys);
    let qty = ys.rows(0, k).into_owned();
    r.solve_upper_triangular(&qty)
        .ok_or_else(|| Error::RankDeficient(names[k - 1].clone()))
}

/// Solves a symmetric positive definite system, `None` if not SPD.
pub(crate) fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if a.nrows() == 0 {
        return Some(DVector::zeros(0));
    }
    a.clone().cholesky().map(|c| c.solve(b))
}
