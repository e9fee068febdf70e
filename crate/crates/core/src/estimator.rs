//! Data-driven estimation of transfer operators and optimal low-rank models.
//!
//! Conventions: `c01[(i, j)] = E[χ1_i(y) χ0_j(x)]`, so operators map coefficient
//! vectors over the `t0` basis (columns) to coefficient vectors over the `t1`
//! basis (rows). Coefficients represent densities relative to the sampling
//! measures; in that representation the constant function is preserved, i.e.
//! `galerkin_operator · 1 = 1` when nothing leaks.
//!
//! The pipeline is the time-lagged CCA construction: whiten both bases with
//! `C^{-1/2}`, take the SVD of `C11^{-1/2} C01 C00^{-1/2}`, keep the top `k`
//! triplets, and map back to the original bases.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde_json::json;

use crate::basis::GridBasis;
use crate::error::{Error, Result};
use crate::linalg::{self, symmetric_function};
use crate::lowrank;
use crate::report;
use crate::scenarios::PairEnsemble;

/// Relative eigenvalue cut-off used when inverting correlation matrices.
pub const DEFAULT_EPSILON: f64 = 1e-10;

/// Distance from 1 within which a real eigenvalue counts as the unit eigenvalue.
pub const UNIT_EIGENVALUE_TOLERANCE: f64 = 0.05;

/// Correlation matrices `C00 (n0×n0)`, `C01 (n1×n0)`, `C11 (n1×n1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationTriple {
    pub c00: DMatrix<f64>,
    pub c01: DMatrix<f64>,
    pub c11: DMatrix<f64>,
    /// Number of sample pairs.
    pub m: usize,
    /// Pairs whose `x` lies in a retained cell of the initial basis.
    pub sources: usize,
    /// Of those, pairs whose `y` falls outside the final basis.
    pub leaked: usize,
}

impl CorrelationTriple {
    pub fn new(c00: DMatrix<f64>, c01: DMatrix<f64>, c11: DMatrix<f64>, m: usize) -> Result<Self> {
        if !c00.is_square() || !c11.is_square() {
            return Err(Error::DimensionMismatch {
                expected: c00.nrows(),
                found: c00.ncols(),
            });
        }
        if c01.shape() != (c11.nrows(), c00.nrows()) {
            return Err(Error::DimensionMismatch {
                expected: c11.nrows(),
                found: c01.nrows(),
            });
        }
        Ok(Self {
            c00,
            c01,
            c11,
            m,
            sources: m,
            leaked: 0,
        })
    }

    pub fn n0(&self) -> usize {
        self.c00.nrows()
    }

    pub fn n1(&self) -> usize {
        self.c11.nrows()
    }

    /// Diagonal of `c00`: the empirical initial cell masses for indicator bases.
    pub fn mu0(&self) -> DVector<f64> {
        self.c00.diagonal()
    }

    pub fn mu1(&self) -> DVector<f64> {
        self.c11.diagonal()
    }

    /// Fraction of retained-source pairs that land outside the final basis.
    pub fn leakage_fraction(&self) -> f64 {
        if self.sources == 0 {
            0.0
        } else {
            self.leaked as f64 / self.sources as f64
        }
    }
}

impl CorrelationTriple {
    /// `c00.csv`, `c01.csv`, `c11.csv` plus a `correlations.json` manifest.
    pub fn write(&self, dir: &Path) -> Result<()> {
        report::write_matrix_csv(&dir.join("c00.csv"), &self.c00)?;
        report::write_matrix_csv(&dir.join("c01.csv"), &self.c01)?;
        report::write_matrix_csv(&dir.join("c11.csv"), &self.c11)?;
        report::write_json(
            &dir.join("correlations.json"),
            &json!({
                "n0": self.n0(),
                "n1": self.n1(),
                "m": self.m,
                "sources": self.sources,
                "leaked": self.leaked,
                "leakage": report::number(self.leakage_fraction()),
            }),
        )
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest = report::read_json(&dir.join("correlations.json"))?;
        let field = |name: &str| {
            manifest[name]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::parse("correlations.json", format!("missing `{name}`")))
        };
        let mut corr = CorrelationTriple::new(
            report::read_matrix_csv(&dir.join("c00.csv"))?,
            report::read_matrix_csv(&dir.join("c01.csv"))?,
            report::read_matrix_csv(&dir.join("c11.csv"))?,
            field("m")?,
        )?;
        corr.sources = field("sources")?;
        corr.leaked = field("leaked")?;
        Ok(corr)
    }
}

/// Monte Carlo correlations for indicator bases, computed from cell counts.
///
/// For indicator functions the empirical products `X0 X0ᵀ / m` etc. are exactly
/// cell (co-)occupation frequencies, so this is exact for the empirical measures.
pub fn correlations(
    basis0: &GridBasis,
    basis1: &GridBasis,
    ensemble: &PairEnsemble,
) -> Result<CorrelationTriple> {
    let a0 = basis0.assign(&ensemble.x)?;
    let a1 = basis1.assign(&ensemble.y)?;
    let (n0, n1, m) = (basis0.len(), basis1.len(), ensemble.len());
    if a0.leakage == m || a1.leakage == m {
        return Err(Error::EmptyBasis);
    }
    let mut n00 = vec![0u64; n0];
    let mut n11 = vec![0u64; n1];
    let mut n01 = vec![0u64; n0 * n1];
    let (mut sources, mut leaked) = (0usize, 0usize);
    for (i0, i1) in a0.indices.iter().zip(&a1.indices) {
        if let Some(j) = i0 {
            n00[*j] += 1;
            sources += 1;
        }
        if let Some(i) = i1 {
            n11[*i] += 1;
        }
        match (i0, i1) {
            (Some(j), Some(i)) => n01[j * n1 + i] += 1,
            (Some(_), None) => leaked += 1,
            _ => {}
        }
    }
    let inv_m = 1.0 / m as f64;
    let c00 = DMatrix::from_diagonal(&DVector::from_iterator(
        n0,
        n00.iter().map(|&c| c as f64 * inv_m),
    ));
    let c11 = DMatrix::from_diagonal(&DVector::from_iterator(
        n1,
        n11.iter().map(|&c| c as f64 * inv_m),
    ));
    let c01 = DMatrix::from_vec(n1, n0, n01.iter().map(|&c| c as f64 * inv_m).collect());
    Ok(CorrelationTriple {
        c00,
        c01,
        c11,
        m,
        sources,
        leaked,
    })
}

/// Correlations from arbitrary data matrices `x0 (n0×m)` and `x1 (n1×m)`.
pub fn correlations_from_data(x0: &DMatrix<f64>, x1: &DMatrix<f64>) -> Result<CorrelationTriple> {
    if x0.ncols() != x1.ncols() {
        return Err(Error::DimensionMismatch {
            expected: x0.ncols(),
            found: x1.ncols(),
        });
    }
    let m = x0.ncols();
    let inv_m = 1.0 / m as f64;
    CorrelationTriple::new(
        x0 * x0.transpose() * inv_m,
        x1 * x0.transpose() * inv_m,
        x1 * x1.transpose() * inv_m,
        m,
    )
}

/// `C^{-1/2}` on eigenmodes with `λ ≥ epsilon · max λ`; dropped modes map to 0.
pub fn inv_sqrt(c: &DMatrix<f64>, epsilon: f64) -> Result<DMatrix<f64>> {
    Ok(symmetric_function(c, epsilon, |l| 1.0 / l.sqrt())?.matrix)
}

/// Symmetric PSD square root on the same retained modes as [`inv_sqrt`].
pub fn sqrt_psd(c: &DMatrix<f64>, epsilon: f64) -> Result<DMatrix<f64>> {
    Ok(symmetric_function(c, epsilon, f64::sqrt)?.matrix)
}

fn require_square(corr: &CorrelationTriple) -> Result<()> {
    if corr.n0() != corr.n1() {
        return Err(Error::DimensionMismatch {
            expected: corr.n0(),
            found: corr.n1(),
        });
    }
    Ok(())
}

/// `T_n = C11⁻¹ C01`: the Galerkin projection of the transfer operator onto the
/// final basis, acting on initial-basis coefficients.
pub fn galerkin_operator(corr: &CorrelationTriple, epsilon: f64) -> Result<DMatrix<f64>> {
    Ok(linalg::pinv_sym(&corr.c11, epsilon)? * &corr.c01)
}

/// `T_ref,n = C00⁻¹ C01`: the transfer operator relative to the sampling
/// (reference) distribution of the `x` points. Its eigenvector at 1 is the
/// correction `μ / μ_ref`.
pub fn reference_operator(corr: &CorrelationTriple, epsilon: f64) -> Result<DMatrix<f64>> {
    require_square(corr)?;
    Ok(linalg::pinv_sym(&corr.c00, epsilon)? * &corr.c01)
}

/// `C11^{-1/2} C01 C00^{-1/2}`, the operator in orthonormal bases.
pub fn whitened_operator(corr: &CorrelationTriple, epsilon: f64) -> Result<DMatrix<f64>> {
    let w0 = inv_sqrt(&corr.c00, epsilon)?;
    let w1 = inv_sqrt(&corr.c11, epsilon)?;
    Ok(w1 * &corr.c01 * w0)
}

/// `K_n = C00⁻¹ C01ᵀ`: Galerkin projection of the Koopman (adjoint) operator
/// onto the initial basis.
pub fn koopman_matrix(corr: &CorrelationTriple, epsilon: f64) -> Result<DMatrix<f64>> {
    Ok(linalg::pinv_sym(&corr.c00, epsilon)? * corr.c01.transpose())
}

/// `C00⁻¹ C11 · t`: reinterprets the output of `t` (densities relative to the
/// final distribution) as densities relative to the initial distribution.
pub fn rescale_to_initial(
    t: &DMatrix<f64>,
    corr: &CorrelationTriple,
    epsilon: f64,
) -> Result<DMatrix<f64>> {
    require_square(corr)?;
    if t.nrows() != corr.n1() {
        return Err(Error::DimensionMismatch {
            expected: corr.n1(),
            found: t.nrows(),
        });
    }
    Ok(linalg::pinv_sym(&corr.c00, epsilon)? * &corr.c11 * t)
}

/// Rank-`k` generalized Markov state model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gmsm {
    /// `C11^{-1/2} C01 C00^{-1/2}` (n1 × n0).
    pub whitened: DMatrix<f64>,
    pub k: usize,
    /// Every singular value of `whitened`, non-increasing.
    pub singular_values: Vec<f64>,
    /// The leading `k` singular values.
    pub sigma: DVector<f64>,
    /// Right (initial-side) whitened singular vectors, n0 × k.
    pub u_w: DMatrix<f64>,
    /// Left (final-side) whitened singular vectors, n1 × k.
    pub v_w: DMatrix<f64>,
    /// `C11^{-1/2} V Σ Uᵀ C00^{1/2}` in the original bases (n1 × n0).
    pub t_k: DMatrix<f64>,
    pub w0: DMatrix<f64>,
    pub w1: DMatrix<f64>,
    pub epsilon: f64,
    /// `‖whitened − V Σ Uᵀ‖₂`.
    pub residual: f64,
}

impl Gmsm {
    /// `V Σ Uᵀ`
    pub fn whitened_rank_k(&self) -> DMatrix<f64> {
        let mut scaled = self.v_w.clone();
        for (j, s) in self.sigma.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*s);
        }
        scaled * self.u_w.transpose()
    }

    /// Values of the right singular functions on each initial cell (n0 × k).
    pub fn right_singular_functions(&self) -> DMatrix<f64> {
        &self.w0 * &self.u_w
    }

    /// Values of the left singular functions on each final cell (n1 × k).
    pub fn left_singular_functions(&self) -> DMatrix<f64> {
        &self.w1 * &self.v_w
    }

    pub fn manifest(&self, leakage: f64) -> serde_json::Value {
        json!({
            "n0": self.w0.nrows(),
            "n1": self.w1.nrows(),
            "k": self.k,
            "epsilon": self.epsilon,
            "sigma": report::vector_json(&self.sigma),
            "singular_values": report::slice_json(&self.singular_values),
            "residual": report::number(self.residual),
            "leakage": report::number(leakage),
        })
    }

    /// Factors `(a, b)` with `a · bᵀ = C00⁻¹ C11 · t_k`, the model rescaled to
    /// map densities relative to the initial distribution onto themselves.
    pub fn rescaled_factors(&self, corr: &CorrelationTriple) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        require_square(corr)?;
        let mut a = &self.w1 * &self.v_w;
        for (j, s) in self.sigma.iter().enumerate() {
            a.column_mut(j).scale_mut(*s);
        }
        let a = linalg::pinv_sym(&corr.c00, self.epsilon)? * &corr.c11 * a;
        let b = sqrt_psd(&corr.c00, self.epsilon)? * &self.u_w;
        Ok((a, b))
    }

    /// `t_k.csv`, `whitened.csv` and `gmsm.json`.
    pub fn write(&self, dir: &Path, leakage: f64) -> Result<()> {
        report::write_matrix_csv(&dir.join("t_k.csv"), &self.t_k)?;
        report::write_matrix_csv(&dir.join("whitened.csv"), &self.whitened)?;
        report::write_json(&dir.join("gmsm.json"), &self.manifest(leakage))
    }
}

/// Best rank-`k` model in terms of worst-case propagation error.
pub fn truncate(corr: &CorrelationTriple, k: usize, epsilon: f64) -> Result<Gmsm> {
    let f0 = symmetric_function(&corr.c00, epsilon, |l| 1.0 / l.sqrt())?;
    let f1 = symmetric_function(&corr.c11, epsilon, |l| 1.0 / l.sqrt())?;
    let available = f0.kept.min(f1.kept);
    if k > available {
        return Err(Error::RankTooLarge {
            requested: k,
            available,
        });
    }
    let (w0, w1) = (f0.matrix, f1.matrix);
    let whitened = &w1 * &corr.c01 * &w0;
    let full = lowrank::svd(&whitened)?;
    let singular_values: Vec<f64> = full.sigma.iter().cloned().collect();
    let top = full.truncated(k);
    let mut gmsm = Gmsm {
        whitened,
        k,
        singular_values,
        sigma: top.sigma.clone(),
        u_w: top.v.clone(),
        v_w: top.u.clone(),
        t_k: DMatrix::zeros(0, 0),
        w0,
        w1,
        epsilon,
        residual: 0.0,
    };
    let approx = gmsm.whitened_rank_k();
    gmsm.residual = lowrank::spectral_norm(&(&gmsm.whitened - &approx));
    gmsm.t_k = &gmsm.w1 * approx * sqrt_psd(&corr.c00, epsilon)?;
    Ok(gmsm)
}

/// Equilibrium density recovered from reference-distribution data.
#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumEstimate {
    /// `μ = μ_corr · μ_ref`, normalized to sum 1.
    pub density: DVector<f64>,
    /// `μ_corr = μ / μ_ref`, scaled so that `Σ μ_corr μ_ref = 1` (zero where
    /// `μ_ref` vanishes).
    pub correction: DVector<f64>,
    /// The eigenvalue used.
    pub eigenvalue: f64,
    /// Negative mass clipped away, as a fraction of total absolute mass.
    pub clipped: f64,
}

/// Corrects the reference distribution with the eigenvector of `t_ref` at the
/// real eigenvalue nearest 1.
pub fn recover_equilibrium(t_ref: &DMatrix<f64>, mu_ref: &DVector<f64>) -> Result<EquilibriumEstimate> {
    if t_ref.nrows() != mu_ref.len() || !t_ref.is_square() {
        return Err(Error::DimensionMismatch {
            expected: t_ref.nrows(),
            found: mu_ref.len(),
        });
    }
    let values = linalg::eigenvalues(t_ref)?;
    let nearest = values
        .iter()
        .filter(|z| z.im == 0.0)
        .min_by(|a, b| (a.re - 1.0).abs().total_cmp(&(b.re - 1.0).abs()))
        .cloned();
    let lambda = match nearest {
        Some(z) if (z.re - 1.0).abs() <= UNIT_EIGENVALUE_TOLERANCE => z.re,
        other => {
            return Err(Error::NoUnitEigenvalue {
                nearest: other.map(|z| z.re).unwrap_or(f64::NAN),
                tolerance: UNIT_EIGENVALUE_TOLERANCE,
            })
        }
    };
    let mut corr = unit_eigenvector(t_ref, lambda)?;
    let ref_total: f64 = mu_ref.sum();
    let mut density = corr.component_mul(mu_ref);
    if density.sum() < 0.0 {
        corr.neg_mut();
        density.neg_mut();
    }
    let abs_total: f64 = density.iter().map(|v| v.abs()).sum();
    let negative: f64 = density.iter().filter(|v| **v < 0.0).map(|v| -v).sum();
    let clipped = if abs_total > 0.0 { negative / abs_total } else { 1.0 };
    if clipped > 0.01 {
        return Err(Error::NegativeDensity { fraction: clipped });
    }
    density.iter_mut().for_each(|v| *v = v.max(0.0));
    let total = density.sum();
    density /= total;
    let correction = DVector::from_iterator(
        mu_ref.len(),
        density
            .iter()
            .zip(mu_ref.iter())
            .map(|(d, r)| if *r > 0.0 { d * ref_total / r } else { 0.0 }),
    );
    Ok(EquilibriumEstimate {
        density,
        correction,
        eigenvalue: lambda,
        clipped,
    })
}

/// Inverse iteration from the constant vector, so a degenerate eigenvalue
/// returns the component of "no correction" in its eigenspace.
fn unit_eigenvector(a: &DMatrix<f64>, lambda: f64) -> Result<DVector<f64>> {
    let n = a.nrows();
    let shift = lambda + 1e-10 * linalg::max_abs(a).max(1.0);
    let lu = (a - DMatrix::identity(n, n) * shift).lu();
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    for _ in 0..4 {
        let mut w = lu.solve(&v).ok_or(Error::ConvergenceFailure)?;
        let norm = w.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::ConvergenceFailure);
        }
        w /= norm;
        v = w;
    }
    Ok(v)
}

/// Reversibilized correlations: every pair `(x, y)` also counts as `(y, x)`,
/// each weighted by `mu_corr` at the cell of `x`.
///
/// `c̄00 = c̄11 = ½(X0 W X0ᵀ + X1 W X1ᵀ)`, `c̄01 = ½(X1 W X0ᵀ + X0 W X1ᵀ)`, all
/// divided by the total weight so they remain probability-normalized.
pub fn koopman_reweight(
    basis: &GridBasis,
    ensemble: &PairEnsemble,
    mu_corr: &DVector<f64>,
) -> Result<CorrelationTriple> {
    if mu_corr.len() != basis.len() {
        return Err(Error::DimensionMismatch {
            expected: basis.len(),
            found: mu_corr.len(),
        });
    }
    if let Some(w) = mu_corr.iter().find(|w| **w < 0.0 || w.is_nan()) {
        return Err(Error::NegativeWeight(*w));
    }
    let a0 = basis.assign(&ensemble.x)?;
    let a1 = basis.assign(&ensemble.y)?;
    let n = basis.len();
    let mut diag = vec![0.0; n];
    let mut c01 = DMatrix::<f64>::zeros(n, n);
    let mut total = 0.0;
    let (mut sources, mut leaked) = (0, 0);
    for (i0, i1) in a0.indices.iter().zip(&a1.indices) {
        let Some(j) = *i0 else { continue };
        sources += 1;
        let w = mu_corr[j];
        total += w;
        diag[j] += 0.5 * w;
        match *i1 {
            Some(i) => {
                diag[i] += 0.5 * w;
                c01[(i, j)] += 0.5 * w;
                c01[(j, i)] += 0.5 * w;
            }
            None => leaked += 1,
        }
    }
    if !(total > 0.0) {
        return Err(Error::AllModesDropped);
    }
    let c00 = DMatrix::from_diagonal(&DVector::from_vec(diag)) / total;
    let c01 = c01 / total;
    Ok(CorrelationTriple {
        c11: c00.clone(),
        c00,
        c01,
        m: ensemble.len(),
        sources,
        leaked,
    })
}
