//! Dense linear-algebra helpers shared by the estimator and spectral modules.

use nalgebra::{ComplexField, DMatrix, DVector, Schur, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Largest absolute entry of `a - aᵀ`.
pub fn max_asymmetry(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

pub(crate) fn check_symmetric(c: &DMatrix<f64>) -> Result<()> {
    if !c.is_square() {
        return Err(Error::DimensionMismatch {
            expected: c.nrows(),
            found: c.ncols(),
        });
    }
    let asym = max_asymmetry(c);
    if asym > 1e-10 * max_abs(c).max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(())
}

fn is_diagonal(c: &DMatrix<f64>) -> bool {
    let n = c.nrows();
    (0..n).all(|j| (0..n).all(|i| i == j || c[(i, j)] == 0.0))
}

/// A symmetric matrix function `Q f(Λ) Qᵀ` restricted to eigenmodes with
/// `λ ≥ epsilon · max λ`. Dropped modes map to zero.
pub struct SpectralFunction {
    pub matrix: DMatrix<f64>,
    pub kept: usize,
}

pub fn symmetric_function(
    c: &DMatrix<f64>,
    epsilon: f64,
    f: impl Fn(f64) -> f64,
) -> Result<SpectralFunction> {
    check_symmetric(c)?;
    let n = c.nrows();
    if n == 0 {
        return Err(Error::AllModesDropped);
    }
    if is_diagonal(c) {
        let diag: Vec<f64> = (0..n).map(|i| c[(i, i)]).collect();
        let top = diag.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(top > 0.0) {
            return Err(Error::AllModesDropped);
        }
        let mut out = DMatrix::zeros(n, n);
        let mut kept = 0;
        for (i, &d) in diag.iter().enumerate() {
            if d >= epsilon * top && d > 0.0 {
                out[(i, i)] = f(d);
                kept += 1;
            }
        }
        return Ok(SpectralFunction { matrix: out, kept });
    }
    // symmetrize exactly before decomposing so the result is symmetric too
    let sym = (c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 0).ok_or(Error::ConvergenceFailure)?;
    let top = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if !(top > 0.0) {
        return Err(Error::AllModesDropped);
    }
    let mut scaled = eig.eigenvectors.clone();
    let mut kept = 0;
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let factor = if lambda >= epsilon * top && lambda > 0.0 {
            kept += 1;
            f(lambda)
        } else {
            0.0
        };
        scaled.column_mut(j).scale_mut(factor);
    }
    let matrix = &scaled * eig.eigenvectors.transpose();
    Ok(SpectralFunction {
        matrix: (&matrix + matrix.transpose()) * 0.5,
        kept,
    })
}

/// Moore–Penrose style inverse of a symmetric PSD matrix with relative cut-off.
pub fn pinv_sym(c: &DMatrix<f64>, epsilon: f64) -> Result<DMatrix<f64>> {
    Ok(symmetric_function(c, epsilon, |l| 1.0 / l)?.matrix)
}

/// All eigenvalues of a general real square matrix via the real Schur form.
pub fn eigenvalues(a: &DMatrix<f64>) -> Result<Vec<Complex64>> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            found: a.ncols(),
        });
    }
    if a.nrows() == 0 {
        return Ok(Vec::new());
    }
    let n = a.nrows();
    let schur = Schur::try_new(a.clone(), f64::EPSILON, 1000 * n.max(10))
        .ok_or(Error::ConvergenceFailure)?;
    Ok(schur.complex_eigenvalues().iter().cloned().collect())
}

/// Deterministic start vector with no special structure.
fn start_vector(n: usize) -> DVector<f64> {
    let mut state: u64 = 0x9E37_79B9_7F4A_7C15;
    DVector::from_fn(n, |_, _| {
        state = state
            .wrapping_mul(6_364_136_223_846_793_005)
            .wrapping_add(1_442_695_040_888_963_407);
        0.5 + ((state >> 11) as f64) / ((1u64 << 53) as f64)
    })
}

fn inverse_iteration<T>(
    a: DMatrix<T>,
    shift: T,
    start: DVector<T>,
    previous: &[DVector<T>],
) -> DVector<T>
where
    T: ComplexField<RealField = f64> + Copy,
{
    let n = a.nrows();
    let shifted = a - DMatrix::<T>::identity(n, n) * shift;
    let lu = shifted.lu();
    let mut x = start;
    for _ in 0..4 {
        let mut y = match lu.solve(&x) {
            Some(y) => y,
            None => break,
        };
        for p in previous {
            let proj = p.dotc(&y);
            y -= p * proj;
        }
        let norm = y.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            break;
        }
        x = y.unscale(norm);
    }
    x
}

pub(crate) fn phase_normalize(v: &mut DVector<Complex64>) {
    let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|z| *z /= norm);
    }
    let mut best = 0;
    let mut best_mod = -1.0;
    for (i, z) in v.iter().enumerate() {
        // strict comparison: first index wins ties
        if z.norm() > best_mod * (1.0 + 1e-12) {
            best_mod = z.norm();
            best = i;
        }
    }
    if best_mod > 0.0 {
        let phase = v[best] / v[best].norm();
        let rot = phase.conj();
        v.iter_mut().for_each(|z| *z *= rot);
        v[best].im = 0.0;
    }
}

/// Eigenvectors for the given (already computed) eigenvalues of `a`.
///
/// Real eigenvalues get real vectors; a conjugate eigenvalue directly following its
/// partner reuses the conjugated partner vector. Vectors are unit length with the
/// largest-modulus entry real and positive.
pub fn eigenvectors(a: &DMatrix<f64>, values: &[Complex64]) -> DMatrix<Complex64> {
    let n = a.nrows();
    let mut out: Vec<DVector<Complex64>> = Vec::with_capacity(values.len());
    let scale = max_abs(a).max(1.0);
    for (idx, &lambda) in values.iter().enumerate() {
        if idx > 0 {
            let prev = values[idx - 1];
            if lambda.im != 0.0 && prev.re == lambda.re && prev.im == -lambda.im {
                let conj = out[idx - 1].map(|z| z.conj());
                out.push(conj);
                continue;
            }
        }
        // vectors already found for (numerically) the same eigenvalue
        let cluster: Vec<usize> = (0..idx)
            .filter(|&j| (values[j] - lambda).norm() <= 1e-8 * scale)
            .collect();
        let delta = 1e-10 * scale;
        let mut v = if lambda.im == 0.0 {
            let previous: Vec<DVector<f64>> = cluster
                .iter()
                .map(|&j| out[j].map(|z| z.re))
                .collect();
            inverse_iteration(a.clone(), lambda.re + delta, start_vector(n), &previous)
                .map(|r| Complex64::new(r, 0.0))
        } else {
            let ac = a.map(|r| Complex64::new(r, 0.0));
            let previous: Vec<DVector<Complex64>> = cluster.iter().map(|&j| out[j].clone()).collect();
            let start = start_vector(n).map(|r| Complex64::new(r, 0.0));
            inverse_iteration(ac, lambda + Complex64::new(delta, delta), start, &previous)
        };
        phase_normalize(&mut v);
        out.push(v);
    }
    let mut m = DMatrix::<Complex64>::zeros(n, values.len());
    for (j, v) in out.iter().enumerate() {
        m.set_column(j, v);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_fast_path_drops_small_modes() {
        let c = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1e-18]));
        let f = symmetric_function(&c, 1e-12, |l| l.powf(-0.5)).unwrap();
        assert_eq!(f.kept, 1);
        assert_eq!(f.matrix[(0, 0)], 0.5);
        assert_eq!(f.matrix[(1, 1)], 0.0);
    }

    #[test]
    fn dense_inverse_square_root_whitens() {
        let c = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let w = symmetric_function(&c, 1e-12, |l| l.powf(-0.5)).unwrap().matrix;
        let id = &w * &c * &w;
        assert!((id - DMatrix::identity(3, 3)).abs().max() < 1e-12);
    }

    #[test]
    fn rejects_asymmetric_input() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(pinv_sym(&c, 1e-10), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn eigenvectors_satisfy_eigen_equation() {
        let a = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.5, 0.2, 0.0, 0.1, //
                -0.3, 0.6, 0.1, 0.0, //
                0.0, 0.1, 0.2, 0.3, //
                0.1, 0.0, -0.2, 0.4,
            ],
        );
        let values = eigenvalues(&a).unwrap();
        let vecs = eigenvectors(&a, &values);
        let ac = a.map(|r| Complex64::new(r, 0.0));
        for (j, &l) in values.iter().enumerate() {
            let v = vecs.column(j).into_owned();
            let r = &ac * &v - &v * l;
            assert!(r.norm() < 1e-10, "residual {} for {}", r.norm(), l);
        }
    }

    #[test]
    fn repeated_eigenvalues_get_independent_vectors() {
        let a = DMatrix::<f64>::identity(3, 3);
        let values = eigenvalues(&a).unwrap();
        let vecs = eigenvectors(&a, &values);
        let gram = vecs.adjoint() * &vecs;
        assert!((gram - DMatrix::<Complex64>::identity(3, 3)).norm() < 1e-8);
    }
}
