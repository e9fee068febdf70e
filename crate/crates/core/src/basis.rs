//! Indicator bases on regular grids.
//!
//! Each retained grid cell contributes one basis function, the indicator of that
//! cell. Cells are half-open `[low, high)` per coordinate except that the top
//! edge of the box is closed, so every point of the box lands in exactly one cell.
//! Flat cell indices are row-major with the first coordinate varying slowest.

use nalgebra::DMatrix;

use crate::config::{join_list, KeyValues};
use crate::error::{Error, Result};
use crate::scenarios::PairEnsemble;

#[derive(Debug, Clone, PartialEq)]
pub struct GridBasis {
    lower: Vec<f64>,
    upper: Vec<f64>,
    bins: Vec<usize>,
    retained: Vec<usize>,
    // flat cell → position in `retained`
    lookup: Vec<Option<usize>>,
}

/// Which time slice(s) must populate a cell for it to survive pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneMode {
    /// At least one `x` point.
    InitialOnly,
    /// At least one `y` point.
    FinalOnly,
    /// At least one `x` point and at least one `y` point.
    Both,
}

impl PruneMode {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "initial_only" => Ok(PruneMode::InitialOnly),
            "final_only" => Ok(PruneMode::FinalOnly),
            "both" => Ok(PruneMode::Both),
            other => Err(Error::invalid("basis.prune", format!("unknown mode `{other}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PruneMode::InitialOnly => "initial_only",
            PruneMode::FinalOnly => "final_only",
            PruneMode::Both => "both",
        }
    }
}

/// Retained-cell index per point (`None` = leaked) and the leak count.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub indices: Vec<Option<usize>>,
    pub leakage: usize,
}

/// Dense data matrix `n × m` and the number of all-zero columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub matrix: DMatrix<f64>,
    pub leakage: usize,
}

impl GridBasis {
    /// Grid with every cell retained.
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, bins: Vec<usize>) -> Result<Self> {
        let total = bins.iter().product::<usize>();
        Self::with_retained(lower, upper, bins, (0..total).collect())
    }

    pub fn with_retained(
        lower: Vec<f64>,
        upper: Vec<f64>,
        bins: Vec<usize>,
        retained: Vec<usize>,
    ) -> Result<Self> {
        let d = lower.len();
        if upper.len() != d || bins.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: upper.len().max(bins.len()),
            });
        }
        if d == 0 {
            return Err(Error::invalid("basis.bins", "need at least one dimension"));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(u > l) || !l.is_finite() || !u.is_finite()) {
            return Err(Error::invalid("basis.upper", "must exceed basis.lower componentwise"));
        }
        if bins.contains(&0) {
            return Err(Error::invalid("basis.bins", "every dimension needs at least one bin"));
        }
        let total = bins.iter().product::<usize>();
        if retained.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("basis.retained", "must be strictly increasing"));
        }
        if retained.last().is_some_and(|&r| r >= total) {
            return Err(Error::invalid("basis.retained", "index beyond the grid"));
        }
        if retained.is_empty() {
            return Err(Error::EmptyBasis);
        }
        let mut lookup = vec![None; total];
        for (pos, &flat) in retained.iter().enumerate() {
            lookup[flat] = Some(pos);
        }
        Ok(Self {
            lower,
            upper,
            bins,
            retained,
            lookup,
        })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Number of basis functions (retained cells).
    pub fn len(&self) -> usize {
        self.retained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.retained.is_empty()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn bins(&self) -> &[usize] {
        &self.bins
    }

    pub fn retained(&self) -> &[usize] {
        &self.retained
    }

    pub fn total_cells(&self) -> usize {
        self.lookup.len()
    }

    /// Flat grid cell containing `point`, or `None` outside the box.
    pub fn cell(&self, point: &[f64]) -> Option<usize> {
        let mut flat = 0usize;
        for k in 0..self.dim() {
            let (lo, hi, b) = (self.lower[k], self.upper[k], self.bins[k]);
            let x = point[k];
            if !(x >= lo && x <= hi) {
                return None;
            }
            let mut idx = ((x - lo) / (hi - lo) * b as f64).floor() as usize;
            if idx >= b {
                idx = b - 1;
            }
            flat = flat * b + idx;
        }
        Some(flat)
    }

    /// Position of `point`'s cell among the retained cells.
    pub fn index(&self, point: &[f64]) -> Option<usize> {
        self.cell(point).and_then(|c| self.lookup[c])
    }

    fn check_dim(&self, points: &DMatrix<f64>) -> Result<()> {
        if points.nrows() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: points.nrows(),
            });
        }
        Ok(())
    }

    pub fn assign(&self, points: &DMatrix<f64>) -> Result<Assignment> {
        self.check_dim(points)?;
        let indices: Vec<Option<usize>> = points
            .column_iter()
            .map(|c| self.index(c.as_slice()))
            .collect();
        let leakage = indices.iter().filter(|i| i.is_none()).count();
        Ok(Assignment { indices, leakage })
    }

    /// Dense `n × m` indicator matrix. Intended for small inputs; the estimator
    /// works from [`GridBasis::assign`] instead.
    pub fn evaluate(&self, points: &DMatrix<f64>) -> Result<Evaluation> {
        let a = self.assign(points)?;
        let mut matrix = DMatrix::zeros(self.len(), points.ncols());
        for (l, idx) in a.indices.iter().enumerate() {
            if let Some(i) = idx {
                matrix[(*i, l)] = 1.0;
            }
        }
        Ok(Evaluation {
            matrix,
            leakage: a.leakage,
        })
    }

    /// Drops retained cells that the ensemble does not populate per `mode`.
    pub fn prune(&self, ensemble: &PairEnsemble, mode: PruneMode) -> Result<GridBasis> {
        let n = self.len();
        let mut has_x = vec![false; n];
        let mut has_y = vec![false; n];
        for i in self.assign(&ensemble.x)?.indices.into_iter().flatten() {
            has_x[i] = true;
        }
        for i in self.assign(&ensemble.y)?.indices.into_iter().flatten() {
            has_y[i] = true;
        }
        let retained: Vec<usize> = (0..n)
            .filter(|&i| match mode {
                PruneMode::InitialOnly => has_x[i],
                PruneMode::FinalOnly => has_y[i],
                PruneMode::Both => has_x[i] && has_y[i],
            })
            .map(|i| self.retained[i])
            .collect();
        GridBasis::with_retained(
            self.lower.clone(),
            self.upper.clone(),
            self.bins.clone(),
            retained,
        )
    }

    /// Center of the `pos`-th retained cell.
    pub fn center(&self, pos: usize) -> Vec<f64> {
        let mut flat = self.retained[pos];
        let mut out = vec![0.0; self.dim()];
        for k in (0..self.dim()).rev() {
            let b = self.bins[k];
            let idx = flat % b;
            flat /= b;
            let w = (self.upper[k] - self.lower[k]) / b as f64;
            out[k] = self.lower[k] + (idx as f64 + 0.5) * w;
        }
        out
    }

    /// Lebesgue volume of one cell.
    pub fn cell_volume(&self) -> f64 {
        (0..self.dim())
            .map(|k| (self.upper[k] - self.lower[k]) / self.bins[k] as f64)
            .product()
    }

    pub fn to_kv(&self, prefix: &str) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set(&format!("{prefix}lower"), join_list(&self.lower));
        kv.set(&format!("{prefix}upper"), join_list(&self.upper));
        kv.set(&format!("{prefix}bins"), join_list(&self.bins));
        kv.set(&format!("{prefix}retained"), join_list(&self.retained));
        kv
    }

    /// Reads `lower`, `upper`, `bins` and optionally `retained` under `prefix`.
    pub fn from_kv(kv: &KeyValues, prefix: &str) -> Result<Self> {
        let key = |s: &str| format!("{prefix}{s}");
        let lower: Vec<f64> = kv
            .list(&key("lower"))?
            .ok_or_else(|| Error::invalid(&key("lower"), "missing"))?;
        let upper: Vec<f64> = kv
            .list(&key("upper"))?
            .ok_or_else(|| Error::invalid(&key("upper"), "missing"))?;
        let bins: Vec<usize> = kv
            .list(&key("bins"))?
            .ok_or_else(|| Error::invalid(&key("bins"), "missing"))?;
        match kv.list::<usize>(&key("retained"))? {
            Some(retained) => Self::with_retained(lower, upper, bins, retained),
            None => Self::new(lower, upper, bins),
        }
    }
}
