#![allow(dead_code)]

use gmsm::basis::GridBasis;
use gmsm::scenarios::PairEnsemble;
use nalgebra::DMatrix;

/// Pairs realizing `counts[(i, j)]` transitions from state `j` to state `i`.
/// State `s` sits at coordinate `s + 0.5`, so a grid on `[0, n]` with `n`
/// bins resolves every state.
pub fn ensemble_from_counts(counts: &DMatrix<usize>) -> PairEnsemble {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for j in 0..counts.ncols() {
        for i in 0..counts.nrows() {
            for _ in 0..counts[(i, j)] {
                xs.push(j as f64 + 0.5);
                ys.push(i as f64 + 0.5);
            }
        }
    }
    let m = xs.len();
    PairEnsemble::new(DMatrix::from_vec(1, m, xs), DMatrix::from_vec(1, m, ys), 0.0, 1.0, 0).unwrap()
}

pub fn grid(states: usize, bins: usize) -> GridBasis {
    GridBasis::new(vec![0.0], vec![states as f64], vec![bins]).unwrap()
}

/// Roots of `z² − s z + p` (sum `s`, product `p`), larger real part first.
pub fn quadratic_roots(s: f64, p: f64) -> (f64, f64) {
    let disc = (s * s - 4.0 * p).sqrt();
    ((s + disc) / 2.0, (s - disc) / 2.0)
}

/// Column-stochastic matrix of a count table.
pub fn column_stochastic(counts: &DMatrix<usize>) -> DMatrix<f64> {
    let c = counts.map(|v| v as f64);
    let mut t = c.clone();
    for j in 0..c.ncols() {
        let s = c.column(j).sum();
        t.column_mut(j).scale_mut(1.0 / s);
    }
    t
}

pub fn det3(a: &DMatrix<f64>) -> f64 {
    a[(0, 0)] * (a[(1, 1)] * a[(2, 2)] - a[(1, 2)] * a[(2, 1)])
        - a[(0, 1)] * (a[(1, 0)] * a[(2, 2)] - a[(1, 2)] * a[(2, 0)])
        + a[(0, 2)] * (a[(1, 0)] * a[(2, 1)] - a[(1, 1)] * a[(2, 0)])
}

/// Three-state reversible chain with stationary `μ = (0.5, 0.3, 0.2)`:
/// symmetric flux in units of 1/100.
pub fn three_state_counts() -> DMatrix<usize> {
    DMatrix::from_row_slice(3, 3, &[45, 4, 1, 4, 24, 2, 1, 2, 17])
}

/// Nonzero eigenvalues of a 3×3 column-stochastic matrix besides 1, from
/// trace and determinant: `λ2 + λ3 = tr − 1`, `λ2 λ3 = det`.
pub fn three_state_eigenvalues(t: &DMatrix<f64>) -> (f64, f64) {
    quadratic_roots(t.trace() - 1.0, det3(t))
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        if off < 1e-30 * (1.0 + m.norm_squared()) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[(p, q)] == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * m[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[(k, p)], m[(k, q)]);
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[(p, k)], m[(q, k)]);
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

pub fn norm2(m: &DMatrix<f64>) -> f64 {
    let g = if m.nrows() >= m.ncols() { m.transpose() * m } else { m * m.transpose() };
    jacobi_eigenvalues(&g)[0].max(0.0).sqrt()
}
