//! Optimal low-rank approximation in the spectral norm.
//!
//! The truncated SVD `U Σ Vᵀ` of the top `k` singular triplets is the best rank-`k`
//! approximation of a matrix, with error exactly `σ_{k+1}`.
//! The estimator relies on this for its whitened-operator truncation, and the
//! property tests here check the optimality claim against random competitors.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Truncated singular value decomposition `a ≈ u · diag(sigma) · vᵀ`.
///
/// `u` holds left singular vectors (range side), `v` right singular vectors
/// (domain side). Each column of `v` has its largest-magnitude entry positive,
/// and the matching `u` column carries the same sign flip so `sigma ≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    pub u: DMatrix<f64>,
    pub sigma: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `u · diag(sigma) · vᵀ`
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut scaled = self.u.clone();
        for (j, s) in self.sigma.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*s);
        }
        scaled * self.v.transpose()
    }

    /// Keep the leading `k` triplets.
    pub fn truncated(&self, k: usize) -> SvdFactors {
        let k = k.min(self.rank());
        SvdFactors {
            u: self.u.columns(0, k).into_owned(),
            sigma: self.sigma.rows(0, k).into_owned(),
            v: self.v.columns(0, k).into_owned(),
        }
    }
}

fn largest_entry_sign(col: nalgebra::DVectorView<'_, f64>) -> f64 {
    let mut best = 0usize;
    let mut best_abs = -1.0;
    for (i, x) in col.iter().enumerate() {
        if x.abs() > best_abs {
            best_abs = x.abs();
            best = i;
        }
    }
    if col.is_empty() || col[best] >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Full thin SVD, singular values non-increasing, with the sign convention above.
pub fn svd(a: &DMatrix<f64>) -> Result<SvdFactors> {
    let (p, q) = a.shape();
    let r = p.min(q);
    if r == 0 {
        return Ok(SvdFactors {
            u: DMatrix::zeros(p, 0),
            sigma: DVector::zeros(0),
            v: DMatrix::zeros(q, 0),
        });
    }
    let dec = nalgebra::SVD::try_new(a.clone(), true, true, f64::EPSILON, 0)
        .ok_or(Error::ConvergenceFailure)?;
    let u_all = dec.u.ok_or(Error::ConvergenceFailure)?;
    let vt_all = dec.v_t.ok_or(Error::ConvergenceFailure)?;
    let sv = dec.singular_values;

    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]).then(i.cmp(&j)));

    let mut u = DMatrix::zeros(p, r);
    let mut v = DMatrix::zeros(q, r);
    let mut sigma = DVector::zeros(r);
    for (dst, &src) in order.iter().enumerate() {
        let vcol = vt_all.row(src).transpose();
        let sign = largest_entry_sign(vcol.column(0));
        v.set_column(dst, &(vcol * sign));
        u.set_column(dst, &(u_all.column(src) * sign));
        sigma[dst] = sv[src].max(0.0);
    }
    Ok(SvdFactors { u, sigma, v })
}

/// Singular values in non-increasing order.
pub fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Vec::new();
    }
    let mut sv: Vec<f64> = a.singular_values().iter().cloned().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

/// Best rank-`k` approximation of `a` in the spectral (and Frobenius) norm.
pub fn best_rank_k(a: &DMatrix<f64>, k: usize) -> Result<SvdFactors> {
    let available = a.nrows().min(a.ncols());
    if k > available {
        return Err(Error::RankTooLarge {
            requested: k,
            available,
        });
    }
    Ok(svd(a)?.truncated(k))
}

/// Largest singular value; zero for empty matrices.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    singular_values(a).first().cloned().unwrap_or(0.0)
}
