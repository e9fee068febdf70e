//! Eigen analysis, implied timescales, set extraction by clustering, and
//! MSM assembly from set memberships.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::RngExt;
use rand_pcg::Pcg64Mcg;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::basis::GridBasis;
use crate::error::{Error, Result};
use crate::linalg;
use crate::lowrank;
use crate::report::{complex_json, matrix_json, number, write_matrix_csv};
use crate::scenarios::{substream, PairEnsemble};

pub const KMEANS_RESTARTS: usize = 20;
pub const KMEANS_MAX_ITER: usize = 300;
const KMEANS_STREAM: u64 = 0x6b6d;

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSummary {
    /// Sorted by non-increasing modulus; equal moduli put positive imaginary part first.
    pub eigenvalues: Vec<Complex64>,
    /// Eigenvectors for the leading values, one per column.
    pub eigenvectors: DMatrix<Complex64>,
    pub timescales: Vec<f64>,
    /// `κ_i = −1/t_i = ln|λ_i| / τ`.
    pub rates: Vec<f64>,
    pub lag: f64,
}

fn modulus_order(a: &Complex64, b: &Complex64) -> std::cmp::Ordering {
    let (ma, mb) = (a.norm(), b.norm());
    let tol = 1e-12 * ma.max(mb).max(1.0);
    if (ma - mb).abs() > tol {
        mb.total_cmp(&ma)
    } else {
        b.im.total_cmp(&a.im)
    }
}

/// Full eigendecomposition of a real square matrix with the leading `nvec`
/// eigenvectors (`nvec = 0` computes none).
pub fn eig_sorted(a: &DMatrix<f64>, nvec: usize, lag: f64) -> Result<SpectralSummary> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            found: a.ncols(),
        });
    }
    let mut values = linalg::eigenvalues(a)?;
    values.sort_by(modulus_order);
    let nvec = nvec.min(values.len());
    let eigenvectors = if nvec > 0 {
        linalg::eigenvectors(a, &values[..nvec])
    } else {
        DMatrix::zeros(a.nrows(), 0)
    };
    let moduli: Vec<f64> = values.iter().map(|z| z.norm()).collect();
    let timescales = implied_timescales(&moduli, lag);
    let rates = moduli
        .iter()
        .map(|&m| {
            if m >= 1.0 {
                0.0
            } else if m <= 0.0 {
                f64::NEG_INFINITY
            } else {
                m.ln() / lag
            }
        })
        .collect();
    Ok(SpectralSummary {
        eigenvalues: values,
        eigenvectors,
        timescales,
        rates,
        lag,
    })
}

/// `t_i = −τ / ln m_i`; `∞` for `m_i ≥ 1`, `0` for `m_i ≤ 0`.
pub fn implied_timescales(moduli: &[f64], lag: f64) -> Vec<f64> {
    moduli
        .iter()
        .map(|&m| {
            if m >= 1.0 {
                f64::INFINITY
            } else if m <= 0.0 {
                0.0
            } else {
                -lag / m.ln()
            }
        })
        .collect()
}

/// Spectrum of the rank-`k` product `a · bᵀ` (`a`, `b` both `n × k`), read off
/// the `k × k` matrix `bᵀ a`. Eigenvectors are mapped back as `a · y`.
pub fn low_rank_eig(a: &DMatrix<f64>, b: &DMatrix<f64>, lag: f64) -> Result<SpectralSummary> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch {
            expected: a.ncols(),
            found: b.ncols(),
        });
    }
    let small = b.transpose() * a;
    let mut summary = eig_sorted(&small, small.nrows(), lag)?;
    let lifted = a.map(|x| Complex64::new(x, 0.0)) * &summary.eigenvectors;
    let mut vectors = DMatrix::zeros(a.nrows(), lifted.ncols());
    for j in 0..lifted.ncols() {
        let mut col = lifted.column(j).into_owned();
        linalg::phase_normalize(&mut col);
        vectors.set_column(j, &col);
    }
    summary.eigenvectors = vectors;
    Ok(summary)
}

impl SpectralSummary {
    pub fn moduli(&self) -> Vec<f64> {
        self.eigenvalues.iter().map(|z| z.norm()).collect()
    }

    pub fn to_json(&self) -> Value {
        json!({
            "lag": number(self.lag),
            "eigenvalues": self.eigenvalues.iter().map(complex_json).collect::<Vec<_>>(),
            "moduli": self.moduli().into_iter().map(number).collect::<Vec<_>>(),
            "timescales": self.timescales.iter().map(|t| number(*t)).collect::<Vec<_>>(),
            "rates": self.rates.iter().map(|r| number(*r)).collect::<Vec<_>>(),
        })
    }

    /// One row per eigenvector entry: `index, re_1, im_1, re_2, im_2, …`.
    pub fn write_eigenvectors_csv(&self, path: &Path) -> Result<()> {
        let v = &self.eigenvectors;
        let mut header = vec!["index".to_string()];
        for j in 0..v.ncols() {
            header.push(format!("re_{}", j + 1));
            header.push(format!("im_{}", j + 1));
        }
        let mut text = header.join(",") + "\n";
        for i in 0..v.nrows() {
            let mut row = vec![i.to_string()];
            for j in 0..v.ncols() {
                row.push(format!("{}", v[(i, j)].re));
                row.push(format!("{}", v[(i, j)].im));
            }
            text += &(row.join(",") + "\n");
        }
        std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Rows of `vectors` flattened to `(re v_1, im v_1, …, re v_k, im v_k)`.
pub fn embed(vectors: &DMatrix<Complex64>) -> DMatrix<f64> {
    let (n, k) = vectors.shape();
    DMatrix::from_fn(n, 2 * k, |p, c| {
        let z = vectors[(p, c / 2)];
        if c % 2 == 0 {
            z.re
        } else {
            z.im
        }
    })
}

fn sq_dist(points: &DMatrix<f64>, p: usize, centers: &DMatrix<f64>, c: usize) -> f64 {
    (0..points.ncols())
        .map(|d| (points[(p, d)] - centers[(c, d)]).powi(2))
        .sum()
}

fn nearest(points: &DMatrix<f64>, p: usize, centers: &DMatrix<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centers.nrows() {
        let d = sq_dist(points, p, centers, c);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_plus_plus(points: &DMatrix<f64>, k: usize, rng: &mut Pcg64Mcg) -> DMatrix<f64> {
    let n = points.nrows();
    let mut centers = DMatrix::zeros(k, points.ncols());
    let first = rng.random_range(0..n);
    centers.set_row(0, &points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|p| sq_dist(points, p, &centers, 0)).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (p, w) in d2.iter().enumerate() {
                if u < *w {
                    chosen = p;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.set_row(c, &points.row(pick));
        for (p, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points, p, &centers, c));
        }
    }
    centers
}

/// One Lloyd run; `None` if a cluster empties.
fn lloyd(points: &DMatrix<f64>, k: usize, rng: &mut Pcg64Mcg) -> Option<(Vec<usize>, f64)> {
    let (n, dim) = points.shape();
    let mut centers = kmeans_plus_plus(points, k, rng);
    let mut labels = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (p, label) in labels.iter_mut().enumerate() {
            let (c, _) = nearest(points, p, &centers);
            if *label != c {
                *label = c;
                changed = true;
            }
        }
        let mut sums = DMatrix::<f64>::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (p, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            for d in 0..dim {
                sums[(c, d)] += points[(p, d)];
            }
        }
        if counts.contains(&0) {
            return None;
        }
        for c in 0..k {
            for d in 0..dim {
                centers[(c, d)] = sums[(c, d)] / counts[c] as f64;
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = (0..n).map(|p| sq_dist(points, p, &centers, labels[p])).sum();
    Some((labels, inertia))
}

/// k-means on arbitrary real points (rows), k-means++ seeding, best of
/// [`KMEANS_RESTARTS`] restarts by inertia (lowest restart index on ties).
pub fn kmeans(points: &DMatrix<f64>, num_sets: usize, seed: u64) -> Result<Vec<usize>> {
    let n = points.nrows();
    if num_sets == 0 || num_sets > n {
        return Err(Error::invalid(
            "cluster.num_sets",
            format!("{num_sets} sets requested for {n} points"),
        ));
    }
    let runs: Vec<Option<(Vec<usize>, f64)>> = (0..KMEANS_RESTARTS)
        .into_par_iter()
        .map(|r| {
            let mut rng = substream(seed, KMEANS_STREAM, r as u64, 0);
            lloyd(points, num_sets, &mut rng)
        })
        .collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    for run in runs.into_iter().flatten() {
        if best.as_ref().is_none_or(|b| run.1 < b.1) {
            best = Some(run);
        }
    }
    best.map(|b| b.0).ok_or(Error::EmptyCluster)
}

/// Cluster the rows of `vectors` (one per basis cell) into `num_sets` sets.
pub fn embed_and_cluster(vectors: &DMatrix<Complex64>, num_sets: usize, seed: u64) -> Result<Vec<usize>> {
    kmeans(&embed(vectors), num_sets, seed)
}

/// Relabel so that set ids follow the order of first appearance along `key`
/// (smallest key first). Makes outputs independent of k-means label order.
pub fn canonical_labels(labels: &[usize], key: &[f64]) -> Vec<usize> {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut mean = vec![(0.0, 0usize); k];
    for (l, x) in labels.iter().zip(key) {
        mean[*l].0 += x;
        mean[*l].1 += 1;
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let ma = mean[a].0 / mean[a].1.max(1) as f64;
        let mb = mean[b].0 / mean[b].1.max(1) as f64;
        ma.total_cmp(&mb).then(a.cmp(&b))
    });
    let mut rename = vec![0; k];
    for (new, old) in order.into_iter().enumerate() {
        rename[old] = new;
    }
    labels.iter().map(|l| rename[*l]).collect()
}

/// Per-set conditional probabilities behind the coherence condition.
#[derive(Debug, Clone, PartialEq)]
pub struct SetCoherence {
    /// `P(y ∈ M1_i | x ∈ M0_i)`
    pub forward: f64,
    /// `P(x ∈ M0_i | y ∈ M1_i)`
    pub backward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Msm {
    /// Column-stochastic: `transition[(i, j)] = P(y ∈ set i | x ∈ set j)`.
    pub transition: DMatrix<f64>,
    pub labels0: Vec<usize>,
    pub labels1: Vec<usize>,
    pub mu0_hat: DVector<f64>,
    pub mu1_hat: DVector<f64>,
    /// `K × n0` row indicators of the initial sets.
    pub members0: DMatrix<f64>,
    /// `K × n1` row indicators of the final sets.
    pub members1: DMatrix<f64>,
    pub coherence: Vec<SetCoherence>,
    /// Pairs whose `x` fell into a labeled cell.
    pub sources: usize,
    /// Of those, pairs dropped because `y` fell outside the final basis.
    pub leaked: usize,
}

fn indicator_rows(labels: &[usize], k: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(k, labels.len());
    for (p, l) in labels.iter().enumerate() {
        m[(*l, p)] = 1.0;
    }
    m
}

pub fn msm_from_labels(
    basis0: &GridBasis,
    basis1: &GridBasis,
    ensemble: &PairEnsemble,
    labels0: &[usize],
    labels1: &[usize],
) -> Result<Msm> {
    if labels0.len() != basis0.len() {
        return Err(Error::DimensionMismatch {
            expected: basis0.len(),
            found: labels0.len(),
        });
    }
    if labels1.len() != basis1.len() {
        return Err(Error::DimensionMismatch {
            expected: basis1.len(),
            found: labels1.len(),
        });
    }
    let k = labels0.iter().chain(labels1).max().map_or(0, |m| m + 1);
    let a0 = basis0.assign(&ensemble.x)?;
    let a1 = basis1.assign(&ensemble.y)?;
    let mut counts = DMatrix::<f64>::zeros(k, k);
    let mut x_mass = vec![0.0; k];
    let mut y_mass = vec![0.0; k];
    let (mut sources, mut leaked, mut finals) = (0usize, 0usize, 0usize);
    for (i0, i1) in a0.indices.iter().zip(&a1.indices) {
        if let Some(p) = i1 {
            y_mass[labels1[*p]] += 1.0;
            finals += 1;
        }
        let Some(q) = i0 else { continue };
        sources += 1;
        let j = labels0[*q];
        x_mass[j] += 1.0;
        match i1 {
            Some(p) => counts[(labels1[*p], j)] += 1.0,
            None => leaked += 1,
        }
    }
    let mut transition = DMatrix::zeros(k, k);
    for j in 0..k {
        let col: f64 = counts.column(j).sum();
        if col == 0.0 {
            return Err(Error::EmptySourceSet(j));
        }
        for i in 0..k {
            transition[(i, j)] = counts[(i, j)] / col;
        }
    }
    let coherence = (0..k)
        .map(|i| SetCoherence {
            forward: transition[(i, i)],
            backward: {
                let row: f64 = counts.row(i).sum();
                if row > 0.0 {
                    counts[(i, i)] / row
                } else {
                    0.0
                }
            },
        })
        .collect();
    let total0: f64 = x_mass.iter().sum();
    let total1 = finals.max(1) as f64;
    Ok(Msm {
        transition,
        labels0: labels0.to_vec(),
        labels1: labels1.to_vec(),
        mu0_hat: DVector::from_iterator(k, x_mass.iter().map(|c| c / total0)),
        mu1_hat: DVector::from_iterator(k, y_mass.iter().map(|c| c / total1)),
        members0: indicator_rows(labels0, k),
        members1: indicator_rows(labels1, k),
        coherence,
        sources,
        leaked,
    })
}

/// Singular values of the MSM as a map between the `μ̂0`- and `μ̂1`-weighted
/// spaces: the SVD of `D1^{-1/2} T̂ D0^{1/2}`.
pub fn weighted_msm_svd(msm: &Msm) -> Result<Vec<f64>> {
    for (i, m) in msm.mu0_hat.iter().chain(msm.mu1_hat.iter()).enumerate() {
        if !(*m > 0.0) {
            return Err(Error::ZeroMass(i % msm.mu0_hat.len().max(1)));
        }
    }
    let k = msm.transition.nrows();
    let a = DMatrix::from_fn(k, k, |i, j| {
        msm.transition[(i, j)] * msm.mu0_hat[j].sqrt() / msm.mu1_hat[i].sqrt()
    });
    Ok(lowrank::singular_values(&a))
}

impl Msm {
    pub fn num_sets(&self) -> usize {
        self.transition.nrows()
    }

    pub fn to_json(&self) -> Value {
        json!({
            "transition": matrix_json(&self.transition),
            "mu0_hat": self.mu0_hat.iter().map(|v| number(*v)).collect::<Vec<_>>(),
            "mu1_hat": self.mu1_hat.iter().map(|v| number(*v)).collect::<Vec<_>>(),
            "labels0": self.labels0,
            "labels1": self.labels1,
            "coherence": self.coherence.iter().map(|c| json!({
                "forward": number(c.forward),
                "backward": number(c.backward),
            })).collect::<Vec<_>>(),
            "sources": self.sources,
            "leaked": self.leaked,
        })
    }

    pub fn write_csv(&self, dir: &Path, stem: &str) -> Result<()> {
        write_matrix_csv(&dir.join(format!("{stem}_transition.csv")), &self.transition)?;
        let n = self.labels0.len().max(self.labels1.len());
        let mut text = String::from("cell,label0,label1\n");
        for p in 0..n {
            let l0 = self.labels0.get(p).map_or(String::new(), |l| l.to_string());
            let l1 = self.labels1.get(p).map_or(String::new(), |l| l.to_string());
            text += &format!("{p},{l0},{l1}\n");
        }
        let path = dir.join(format!("{stem}_labels.csv"));
        std::fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Labels from a labels CSV written by [`Msm::write_csv`] or the `cluster` verb.
pub fn read_labels(path: &Path) -> Result<(Vec<usize>, Vec<usize>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut l0 = Vec::new();
    let mut l1 = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let ctx = || format!("{}:{}", path.display(), lineno + 1);
        if fields.len() != 3 {
            return Err(Error::parse(ctx(), "expected 3 columns"));
        }
        for (field, out) in fields[1..].iter().zip([&mut l0, &mut l1]) {
            if !field.is_empty() {
                out.push(field.parse().map_err(|e| Error::parse(ctx(), format!("{e}")))?);
            }
        }
    }
    Ok((l0, l1))
}
