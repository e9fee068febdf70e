//! Stochastic dynamics and trajectory-pair sampling.
//!
//! All dynamics are overdamped Langevin diffusions
//! `dx = F(t, x) dt + sqrt(2/β) dW`, integrated with Euler–Maruyama. Sampling is
//! reproducible: every random draw comes from a substream derived from the master
//! seed and the pair index, so results do not depend on thread scheduling.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::DMatrix;
use rand::{RngExt, SeedableRng};
use rand_distr::StandardNormal;
use rand_pcg::Pcg64Mcg;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{join_list, parse_list, KeyValues};
use crate::error::{Error, Result};

/// Resampling budget for a pair whose path blows up.
pub const MAX_RETRIES: usize = 10;

/// Potential energy landscapes (plus optional non-gradient forcing).
#[derive(Debug, Clone, PartialEq)]
pub enum Potential {
    /// `W = 0` in `dim` dimensions.
    Free { dim: usize },
    /// `W = stiffness · |x|² / 2`, an Ornstein–Uhlenbeck process.
    Harmonic { dim: usize, stiffness: f64 },
    /// `W = (x² − 1)²`
    DoubleWell,
    /// `W(t, x) = 7 ((x − s)(x − 1 − s)(x + 1 − s))²` with `s = t / 10`.
    ShiftingTripleWell,
    /// `W = cos(7φ) + 10 (r − 1)²` plus the circular forcing
    /// `driving · e^{−βW} · (x₂, −x₁)`, which rotates clockwise.
    SevenWellCircular { driving: f64 },
}

impl Potential {
    pub fn dim(&self) -> usize {
        match self {
            Potential::Free { dim } | Potential::Harmonic { dim, .. } => *dim,
            Potential::DoubleWell | Potential::ShiftingTripleWell => 1,
            Potential::SevenWellCircular { .. } => 2,
        }
    }

    /// Global minimum of `W` over space, used as the rejection-sampling envelope.
    pub fn minimum(&self) -> f64 {
        match self {
            Potential::SevenWellCircular { .. } => -1.0,
            _ => 0.0,
        }
    }

    pub fn energy(&self, t: f64, x: &[f64]) -> f64 {
        match self {
            Potential::Free { .. } => 0.0,
            Potential::Harmonic { stiffness, .. } => {
                0.5 * stiffness * x.iter().map(|v| v * v).sum::<f64>()
            }
            Potential::DoubleWell => {
                let q = x[0] * x[0] - 1.0;
                q * q
            }
            Potential::ShiftingTripleWell => {
                let u = x[0] - t / 10.0;
                let f = u * u * u - u;
                7.0 * f * f
            }
            Potential::SevenWellCircular { .. } => {
                let r = x[0].hypot(x[1]);
                let phi = x[1].atan2(x[0]);
                (7.0 * phi).cos() + 10.0 * (r - 1.0) * (r - 1.0)
            }
        }
    }

    /// Writes `∇W(t, x)` into `out`.
    pub fn gradient(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            Potential::Free { .. } => out.iter_mut().for_each(|v| *v = 0.0),
            Potential::Harmonic { stiffness, .. } => {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = stiffness * v;
                }
            }
            Potential::DoubleWell => out[0] = 4.0 * x[0] * (x[0] * x[0] - 1.0),
            Potential::ShiftingTripleWell => {
                let u = x[0] - t / 10.0;
                let f = u * u * u - u;
                out[0] = 14.0 * f * (3.0 * u * u - 1.0);
            }
            Potential::SevenWellCircular { .. } => {
                let r = x[0].hypot(x[1]);
                if r < 1e-12 {
                    out[0] = 0.0;
                    out[1] = 0.0;
                    return;
                }
                let phi = x[1].atan2(x[0]);
                let (c, s) = (x[0] / r, x[1] / r);
                let d_r = 20.0 * (r - 1.0);
                let d_phi = -7.0 * (7.0 * phi).sin() / r;
                // ∇W = ∂_r W · r̂ + (1/r) ∂_φ W · φ̂,  φ̂ = (−sin φ, cos φ)
                out[0] = d_r * c - d_phi * s;
                out[1] = d_r * s + d_phi * c;
            }
        }
    }
}

/// Drift field `F = −∇W (+ forcing)` together with the inverse temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftField {
    pub potential: Potential,
    pub beta: f64,
}

impl DriftField {
    pub fn new(potential: Potential, beta: f64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::invalid("beta", "must be positive and finite"));
        }
        Ok(Self { potential, beta })
    }

    pub fn dim(&self) -> usize {
        self.potential.dim()
    }

    pub fn energy(&self, t: f64, x: &[f64]) -> f64 {
        self.potential.energy(t, x)
    }

    pub fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.potential.gradient(t, x, out);
        out.iter_mut().for_each(|v| *v = -*v);
        if let Potential::SevenWellCircular { driving } = self.potential {
            let scale = driving * (-self.beta * self.potential.energy(t, x)).exp();
            out[0] += scale * x[1];
            out[1] -= scale * x[0];
        }
    }
}

/// How each `x` weight is modulated on top of `exp(−βW)` when sampling an
/// analytic initial density. Weights act on the first coordinate.
#[derive(Debug, Clone, PartialEq)]
pub enum Weighting {
    Uniform,
    /// Weight `left_weight` for `x₁ < threshold`, `1 − left_weight` otherwise.
    Split { threshold: f64, left_weight: f64 },
    /// Zero weight for `|x₁| < inner_half_width`.
    Outer { inner_half_width: f64 },
}

impl Weighting {
    fn weight(&self, x: &[f64]) -> f64 {
        match *self {
            Weighting::Uniform => 1.0,
            Weighting::Split {
                threshold,
                left_weight,
            } => {
                if x[0] < threshold {
                    left_weight
                } else {
                    1.0 - left_weight
                }
            }
            Weighting::Outer { inner_half_width } => {
                if x[0].abs() < inner_half_width {
                    0.0
                } else {
                    1.0
                }
            }
        }
    }

    fn max_weight(&self) -> f64 {
        match *self {
            Weighting::Split { left_weight, .. } => left_weight.max(1.0 - left_weight),
            _ => 1.0,
        }
    }
}

/// Unnormalized density `weight(x) · exp(−β (W(time, x) − min W))` on a box.
#[derive(Debug, Clone, PartialEq)]
pub struct DensitySpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub beta: f64,
    pub time: f64,
    pub weighting: Weighting,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialSampler {
    /// Rejection sampling from an analytic density.
    Density(DensitySpec),
    /// Cycle through a fixed list of points.
    Points(Vec<Vec<f64>>),
    /// Snapshots of one long trajectory started at `start`, taken every `stride`
    /// time units after `burn_in`; each snapshot is used for `replicas`
    /// consecutive pairs. Time is frozen at `t0` along this trajectory.
    LongTrajectory {
        start: Vec<f64>,
        burn_in: f64,
        stride: f64,
        replicas: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub t0: f64,
    pub t1: f64,
    pub dt: f64,
    pub m: usize,
    pub seed: u64,
    pub initial: InitialSampler,
}

impl SimConfig {
    pub fn lag(&self) -> f64 {
        self.t1 - self.t0
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.t1 > self.t0) {
            return Err(Error::invalid("sim.t1", "must exceed sim.t0"));
        }
        if !(self.dt > 0.0) || self.dt > self.lag() {
            return Err(Error::invalid("sim.dt", "must lie in (0, t1 - t0]"));
        }
        if self.m == 0 {
            return Err(Error::invalid("sim.m", "need at least one pair"));
        }
        match &self.initial {
            InitialSampler::Density(spec) => {
                if spec.lower.len() != dim || spec.upper.len() != dim {
                    return Err(Error::invalid("init.lower", "box dimension differs from field"));
                }
                if spec.lower.iter().zip(&spec.upper).any(|(l, u)| !(u > l)) {
                    return Err(Error::invalid("init.upper", "must exceed init.lower"));
                }
                if !(spec.beta > 0.0) {
                    return Err(Error::invalid("init.beta", "must be positive"));
                }
                if let Weighting::Split { left_weight, .. } = spec.weighting {
                    if !(0.0..=1.0).contains(&left_weight) {
                        return Err(Error::invalid("init.left_weight", "must lie in [0, 1]"));
                    }
                }
            }
            InitialSampler::Points(points) => {
                if points.is_empty() {
                    return Err(Error::invalid("init.points", "empty point list"));
                }
                if let Some(p) = points.iter().find(|p| p.len() != dim) {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        found: p.len(),
                    });
                }
            }
            InitialSampler::LongTrajectory {
                start,
                burn_in,
                stride,
                replicas,
            } => {
                if start.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        found: start.len(),
                    });
                }
                if !(*burn_in >= 0.0) {
                    return Err(Error::invalid("init.burn_in", "must be non-negative"));
                }
                if !(*stride > 0.0) {
                    return Err(Error::invalid("init.stride", "must be positive"));
                }
                if *replicas == 0 {
                    return Err(Error::invalid("init.replicas", "must be at least 1"));
                }
            }
        }
        Ok(())
    }
}

/// `m` pairs `(x_i, y_i)`: states at `t0` and their images at `t1`, stored as
/// columns of `d × m` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct PairEnsemble {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub t0: f64,
    pub t1: f64,
    pub seed: u64,
    /// Paths that diverged and were resampled.
    pub retries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMetadata {
    pub t0: f64,
    pub t1: f64,
    pub seed: u64,
    pub m: usize,
}

impl PairEnsemble {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>, t0: f64, t1: f64, seed: u64) -> Result<Self> {
        if x.shape() != y.shape() {
            return Err(Error::DimensionMismatch {
                expected: x.ncols(),
                found: y.ncols(),
            });
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step: 0, time: t0 });
        }
        Ok(Self {
            x,
            y,
            t0,
            t1,
            seed,
            retries: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lag(&self) -> f64 {
        self.t1 - self.t0
    }

    pub fn metadata(&self) -> EnsembleMetadata {
        EnsembleMetadata {
            t0: self.t0,
            t1: self.t1,
            seed: self.seed,
            m: self.len(),
        }
    }

    /// CSV with header `x1..xd,y1..yd`, one pair per row, plus a JSON sidecar
    /// `<stem>.json` holding `{t0, t1, seed, m}`.
    pub fn write(&self, csv_path: &Path) -> Result<()> {
        use std::io::Write;
        let d = self.dim();
        let file = std::fs::File::create(csv_path)
            .map_err(|e| Error::io(format!("creating {}", csv_path.display()), e))?;
        let mut w = std::io::BufWriter::new(file);
        let header: Vec<String> = (1..=d)
            .map(|i| format!("x{i}"))
            .chain((1..=d).map(|i| format!("y{i}")))
            .collect();
        let io_err = |e| Error::io(format!("writing {}", csv_path.display()), e);
        writeln!(w, "{}", header.join(",")).map_err(io_err)?;
        for l in 0..self.len() {
            let row: Vec<String> = self
                .x
                .column(l)
                .iter()
                .chain(self.y.column(l).iter())
                .map(|v| v.to_string())
                .collect();
            writeln!(w, "{}", row.join(",")).map_err(io_err)?;
        }
        w.flush().map_err(io_err)?;
        let meta = serde_json::to_string_pretty(&self.metadata())
            .map_err(|e| Error::io("serializing ensemble metadata", e))?;
        std::fs::write(csv_path.with_extension("json"), meta + "\n")
            .map_err(|e| Error::io("writing ensemble metadata", e))
    }

    pub fn read(csv_path: &Path) -> Result<Self> {
        let ctx = csv_path.display().to_string();
        let text = std::fs::read_to_string(csv_path).map_err(|e| Error::io(&ctx, e))?;
        let meta_text = std::fs::read_to_string(csv_path.with_extension("json"))
            .map_err(|e| Error::io(format!("{ctx} metadata"), e))?;
        let meta: EnsembleMetadata =
            serde_json::from_str(&meta_text).map_err(|e| Error::parse(&ctx, e.to_string()))?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::parse(&ctx, "empty file"))?;
        let cols = header.split(',').count();
        if cols % 2 != 0 || cols == 0 {
            return Err(Error::parse(&ctx, "header must be x1..xd,y1..yd"));
        }
        let d = cols / 2;
        let mut xs = Vec::with_capacity(meta.m * d);
        let mut ys = Vec::with_capacity(meta.m * d);
        for (i, line) in lines.enumerate() {
            let row: Vec<f64> =
                parse_list(line).map_err(|e| Error::parse(format!("{ctx} row {}", i + 1), e))?;
            if row.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    found: row.len(),
                });
            }
            xs.extend_from_slice(&row[..d]);
            ys.extend_from_slice(&row[d..]);
        }
        let m = xs.len() / d;
        if m != meta.m {
            return Err(Error::DimensionMismatch {
                expected: meta.m,
                found: m,
            });
        }
        PairEnsemble::new(
            DMatrix::from_vec(d, m, xs),
            DMatrix::from_vec(d, m, ys),
            meta.t0,
            meta.t1,
            meta.seed,
        )
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_INITIAL: u64 = 1;
const STREAM_PATH: u64 = 2;
const STREAM_TRAJECTORY: u64 = 3;

/// Independent generator for `(seed, stream, index, attempt)`.
pub fn substream(seed: u64, stream: u64, index: u64, attempt: u64) -> Pcg64Mcg {
    let h = splitmix64(seed ^ splitmix64(stream ^ splitmix64(index ^ splitmix64(attempt))));
    Pcg64Mcg::seed_from_u64(h)
}

/// Euler–Maruyama path from `(t0, x0)` to `t1`; the last step is shortened so
/// the path ends exactly at `t1`.
pub fn integrate_path<R: rand::Rng + ?Sized>(
    field: &DriftField,
    x0: &[f64],
    t0: f64,
    t1: f64,
    dt: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut x = x0.to_vec();
    integrate_in_place(field, &mut x, t0, t1, dt, rng, None)?;
    Ok(x)
}

fn integrate_in_place<R: rand::Rng + ?Sized>(
    field: &DriftField,
    x: &mut [f64],
    t0: f64,
    t1: f64,
    dt: f64,
    rng: &mut R,
    frozen_time: Option<f64>,
) -> Result<()> {
    if !(dt > 0.0) {
        return Err(Error::invalid("sim.dt", "must be positive"));
    }
    let d = x.len();
    let mut f = vec![0.0; d];
    let span = t1 - t0;
    let full = (span / dt * (1.0 + 1e-12)).floor() as usize;
    let rest = span - full as f64 * dt;
    let steps = if rest > 1e-9 * dt { full + 1 } else { full };
    let noise_full = (2.0 * dt / field.beta).sqrt();
    let mut t = t0;
    for step in 0..steps {
        let h = if step < full { dt } else { rest };
        let noise = if step < full {
            noise_full
        } else {
            (2.0 * h / field.beta).sqrt()
        };
        field.drift(frozen_time.unwrap_or(t), x, &mut f);
        let mut finite = true;
        for i in 0..d {
            let xi: f64 = rng.sample(StandardNormal);
            x[i] += f[i] * h + noise * xi;
            finite &= x[i].is_finite();
        }
        t = if step + 1 == steps {
            t1
        } else {
            t0 + (step + 1) as f64 * dt
        };
        if !finite {
            return Err(Error::NonFiniteState {
                step: step + 1,
                time: t,
            });
        }
    }
    Ok(())
}

fn draw_from_density<R: rand::Rng + ?Sized>(
    field: &DriftField,
    spec: &DensitySpec,
    rng: &mut R,
) -> Vec<f64> {
    let wmin = field.potential.minimum();
    let cap = spec.weighting.max_weight();
    let mut x = vec![0.0; spec.lower.len()];
    loop {
        for (i, xi) in x.iter_mut().enumerate() {
            let u: f64 = rng.random();
            *xi = spec.lower[i] + u * (spec.upper[i] - spec.lower[i]);
        }
        let w = spec.weighting.weight(&x);
        if w <= 0.0 {
            continue;
        }
        let dens = w * (-spec.beta * (field.energy(spec.time, &x) - wmin)).exp();
        let u: f64 = rng.random();
        if u * cap < dens {
            return x;
        }
    }
}

fn initial_points(field: &DriftField, cfg: &SimConfig) -> Result<DMatrix<f64>> {
    let d = field.dim();
    let m = cfg.m;
    let mut data = vec![0.0; d * m];
    match &cfg.initial {
        InitialSampler::Density(spec) => {
            data.par_chunks_mut(d).enumerate().for_each(|(i, out)| {
                let mut rng = substream(cfg.seed, STREAM_INITIAL, i as u64, 0);
                out.copy_from_slice(&draw_from_density(field, spec, &mut rng));
            });
        }
        InitialSampler::Points(points) => {
            for (i, out) in data.chunks_mut(d).enumerate() {
                out.copy_from_slice(&points[i % points.len()]);
            }
        }
        InitialSampler::LongTrajectory {
            start,
            burn_in,
            stride,
            replicas,
        } => {
            let snapshots = m.div_ceil(*replicas);
            let mut rng = substream(cfg.seed, STREAM_TRAJECTORY, 0, 0);
            let mut x = start.clone();
            let frozen = Some(cfg.t0);
            if *burn_in > 0.0 {
                integrate_in_place(field, &mut x, 0.0, *burn_in, cfg.dt, &mut rng, frozen)?;
            }
            for s in 0..snapshots {
                if s > 0 {
                    integrate_in_place(field, &mut x, 0.0, *stride, cfg.dt, &mut rng, frozen)?;
                }
                for r in 0..*replicas {
                    let i = s * replicas + r;
                    if i < m {
                        data[i * d..(i + 1) * d].copy_from_slice(&x);
                    }
                }
            }
        }
    }
    Ok(DMatrix::from_vec(d, m, data))
}

/// Draws `cfg.m` initial states and propagates each from `t0` to `t1`.
///
/// A diverging path is redrawn from a fresh substream up to [`MAX_RETRIES`]
/// times; after that the lowest failing pair index is reported.
pub fn sample_pairs(field: &DriftField, cfg: &SimConfig) -> Result<PairEnsemble> {
    let d = field.dim();
    cfg.validate(d)?;
    let x = initial_points(field, cfg)?;
    let mut ydata = x.as_slice().to_vec();
    let retries = AtomicUsize::new(0);
    let failure = ydata
        .par_chunks_mut(d)
        .enumerate()
        .map(|(i, out)| {
            let start = out.to_vec();
            for attempt in 0..=MAX_RETRIES {
                let mut rng = substream(cfg.seed, STREAM_PATH, i as u64, attempt as u64);
                out.copy_from_slice(&start);
                if integrate_in_place(field, out, cfg.t0, cfg.t1, cfg.dt, &mut rng, None).is_ok() {
                    retries.fetch_add(attempt, Ordering::Relaxed);
                    return None;
                }
            }
            Some(i)
        })
        .reduce(|| None, |a, b| match (a, b) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        });
    if let Some(index) = failure {
        return Err(Error::DivergentPair {
            index,
            retries: MAX_RETRIES,
        });
    }
    let y = DMatrix::from_vec(d, cfg.m, ydata);
    let mut ens = PairEnsemble::new(x, y, cfg.t0, cfg.t1, cfg.seed)?;
    ens.retries = retries.into_inner();
    Ok(ens)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioName {
    DoubleWell,
    ShiftingTripleWell,
    SevenWellCircular,
}

impl ScenarioName {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "double_well" => Ok(ScenarioName::DoubleWell),
            "shifting_triple_well" => Ok(ScenarioName::ShiftingTripleWell),
            "seven_well_circular" => Ok(ScenarioName::SevenWellCircular),
            other => Err(Error::UnknownScenario(other.to_string())),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioName::DoubleWell => "double_well",
            ScenarioName::ShiftingTripleWell => "shifting_triple_well",
            ScenarioName::SevenWellCircular => "seven_well_circular",
        }
    }
}

/// Bottom of the first of the seven wells, at angle π/7.
pub fn seven_well_start() -> Vec<f64> {
    vec![(PI / 7.0).cos(), (PI / 7.0).sin()]
}

/// Default field and sampling protocol of a named scenario, with `overrides`
/// applied last (same keys as [`scenario_to_kv`]).
pub fn builtin_scenario(name: &str, overrides: &KeyValues) -> Result<(DriftField, SimConfig)> {
    let scenario = ScenarioName::parse(name)?;
    let (potential, beta, t1, m, initial) = match scenario {
        ScenarioName::DoubleWell => (
            Potential::DoubleWell,
            5.0,
            10.0,
            1_000_000,
            InitialSampler::LongTrajectory {
                start: vec![-1.0],
                burn_in: 100.0,
                stride: 1.0,
                replicas: 1,
            },
        ),
        ScenarioName::ShiftingTripleWell => (
            Potential::ShiftingTripleWell,
            5.0,
            10.0,
            1_000_000,
            InitialSampler::Density(DensitySpec {
                lower: vec![-2.0],
                upper: vec![2.0],
                beta: 5.0,
                time: 0.0,
                weighting: Weighting::Uniform,
            }),
        ),
        ScenarioName::SevenWellCircular => (
            Potential::SevenWellCircular { driving: 1.0 },
            2.0,
            1.0,
            5_000_000,
            InitialSampler::LongTrajectory {
                start: seven_well_start(),
                burn_in: 0.0,
                stride: 0.01,
                replicas: 100,
            },
        ),
    };
    let field = DriftField::new(potential, beta)?;
    let cfg = SimConfig {
        t0: 0.0,
        t1,
        dt: 1e-3,
        m,
        seed: 1,
        initial,
    };
    let mut kv = scenario_to_kv(scenario, &field, &cfg);
    kv.merge(overrides);
    scenario_from_kv(&kv)
}

fn points_to_string(points: &[Vec<f64>]) -> String {
    points
        .iter()
        .map(|p| join_list(p))
        .collect::<Vec<_>>()
        .join(";")
}

/// Serializes a scenario into flat `scenario.*`, `sim.*` and `init.*` keys.
pub fn scenario_to_kv(name: ScenarioName, field: &DriftField, cfg: &SimConfig) -> KeyValues {
    let mut kv = KeyValues::new();
    kv.set("scenario", name.as_str());
    kv.set("scenario.beta", field.beta);
    if let Potential::SevenWellCircular { driving } = field.potential {
        kv.set("scenario.driving", driving);
    }
    kv.set("sim.t0", cfg.t0);
    kv.set("sim.t1", cfg.t1);
    kv.set("sim.dt", cfg.dt);
    kv.set("sim.m", cfg.m);
    kv.set("sim.seed", cfg.seed);
    match &cfg.initial {
        InitialSampler::Density(spec) => {
            kv.set("init", "density");
            kv.set("init.lower", join_list(&spec.lower));
            kv.set("init.upper", join_list(&spec.upper));
            kv.set("init.beta", spec.beta);
            kv.set("init.time", spec.time);
            match spec.weighting {
                Weighting::Uniform => kv.set("init.weighting", "uniform"),
                Weighting::Split {
                    threshold,
                    left_weight,
                } => {
                    kv.set("init.weighting", "split");
                    kv.set("init.threshold", threshold);
                    kv.set("init.left_weight", left_weight);
                }
                Weighting::Outer { inner_half_width } => {
                    kv.set("init.weighting", "outer");
                    kv.set("init.inner_half_width", inner_half_width);
                }
            }
        }
        InitialSampler::Points(points) => {
            kv.set("init", "points");
            kv.set("init.points", points_to_string(points));
        }
        InitialSampler::LongTrajectory {
            start,
            burn_in,
            stride,
            replicas,
        } => {
            kv.set("init", "long_trajectory");
            kv.set("init.start", join_list(start));
            kv.set("init.burn_in", burn_in);
            kv.set("init.stride", stride);
            kv.set("init.replicas", replicas);
        }
    }
    kv
}

/// Inverse of [`scenario_to_kv`]. Missing `init.*` keys fall back to the
/// scenario's defaults only through [`builtin_scenario`]; here they are required.
pub fn scenario_from_kv(kv: &KeyValues) -> Result<(DriftField, SimConfig)> {
    let name: String = kv.required("scenario")?;
    let scenario = ScenarioName::parse(&name)?;
    let beta: f64 = kv.required("scenario.beta")?;
    let potential = match scenario {
        ScenarioName::DoubleWell => Potential::DoubleWell,
        ScenarioName::ShiftingTripleWell => Potential::ShiftingTripleWell,
        ScenarioName::SevenWellCircular => Potential::SevenWellCircular {
            driving: kv.parsed_or("scenario.driving", 1.0)?,
        },
    };
    let field = DriftField::new(potential, beta)?;
    let init_kind: String = kv.required("init")?;
    let initial = match init_kind.as_str() {
        "density" => {
            let weighting = match kv.get("init.weighting").unwrap_or("uniform") {
                "uniform" => Weighting::Uniform,
                "split" => Weighting::Split {
                    threshold: kv.parsed_or("init.threshold", 0.0)?,
                    left_weight: kv.required("init.left_weight")?,
                },
                "outer" => Weighting::Outer {
                    inner_half_width: kv.required("init.inner_half_width")?,
                },
                other => return Err(Error::invalid("init.weighting", format!("unknown `{other}`"))),
            };
            InitialSampler::Density(DensitySpec {
                lower: kv.list("init.lower")?.ok_or_else(|| Error::invalid("init.lower", "missing"))?,
                upper: kv.list("init.upper")?.ok_or_else(|| Error::invalid("init.upper", "missing"))?,
                beta: kv.parsed_or("init.beta", beta)?,
                time: kv.parsed_or("init.time", 0.0)?,
                weighting,
            })
        }
        "points" => {
            let text = kv.get("init.points").unwrap_or("");
            let points = text
                .split(';')
                .filter(|s| !s.trim().is_empty())
                .map(parse_list::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::invalid("init.points", e))?;
            InitialSampler::Points(points)
        }
        "long_trajectory" => InitialSampler::LongTrajectory {
            start: kv.list("init.start")?.ok_or_else(|| Error::invalid("init.start", "missing"))?,
            burn_in: kv.parsed_or("init.burn_in", 0.0)?,
            stride: kv.required("init.stride")?,
            replicas: kv.parsed_or("init.replicas", 1)?,
        },
        other => return Err(Error::invalid("init", format!("unknown sampler `{other}`"))),
    };
    let t0: f64 = kv.required("sim.t0")?;
    let t1: f64 = match kv.parsed::<f64>("sim.tau")? {
        Some(tau) => t0 + tau,
        None => kv.required("sim.t1")?,
    };
    let cfg = SimConfig {
        t0,
        t1,
        dt: kv.required("sim.dt")?,
        m: kv.required("sim.m")?,
        seed: kv.required("sim.seed")?,
        initial,
    };
    cfg.validate(field.dim())?;
    Ok((field, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn free_field(beta: f64) -> DriftField {
        DriftField::new(Potential::Free { dim: 1 }, beta).unwrap()
    }

    #[test]
    fn noise_free_fixed_point() {
        let field = free_field(1e12);
        let mut rng = substream(7, 0, 0, 0);
        let x = integrate_path(&field, &[0.0], 0.0, 3.7, 1e-2, &mut rng).unwrap();
        assert!(x[0].abs() < 1e-4);
    }

    #[test]
    fn double_well_drift_by_hand() {
        let (field, cfg) = builtin_scenario("double_well", &KeyValues::new()).unwrap();
        let mut out = [0.0];
        field.drift(0.0, &[0.5], &mut out);
        assert!((out[0] - 1.5).abs() < 1e-14);
        assert_eq!(field.beta, 5.0);
        assert_eq!(cfg.lag(), 10.0);
    }

    #[test]
    fn triple_well_middle_bottom_at_origin() {
        let (field, cfg) = builtin_scenario("shifting_triple_well", &KeyValues::new()).unwrap();
        assert_eq!(field.energy(0.0, &[0.0]), 0.0);
        assert_eq!(field.energy(10.0, &[1.0]), 0.0);
        assert_eq!((cfg.t0, cfg.t1), (0.0, 10.0));
    }

    #[test]
    fn seven_well_values_on_the_unit_circle() {
        let (field, _) = builtin_scenario("seven_well_circular", &KeyValues::new()).unwrap();
        assert!((field.energy(0.0, &[1.0, 0.0]) - 1.0).abs() < 1e-14);
        let mut out = [0.0; 2];
        field.drift(0.0, &[1.0, 0.0], &mut out);
        // −∇W vanishes at φ = 0, r = 1; what remains is the clockwise forcing
        let e2 = (-2.0f64).exp();
        assert!(out[0].abs() < 1e-12);
        assert!((out[1] + e2).abs() < 1e-12);
    }

    #[test]
    fn seven_well_gradient_matches_finite_differences() {
        let p = Potential::SevenWellCircular { driving: 1.0 };
        let x = [0.7, -0.4];
        let mut g = [0.0; 2];
        p.gradient(0.0, &x, &mut g);
        let h = 1e-6;
        for i in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fd = (p.energy(0.0, &xp) - p.energy(0.0, &xm)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn triple_well_gradient_matches_finite_differences() {
        let p = Potential::ShiftingTripleWell;
        for &(t, x) in &[(0.0, 0.3), (4.0, -0.8), (9.5, 1.7)] {
            let mut g = [0.0];
            p.gradient(t, &[x], &mut g);
            let h = 1e-6;
            let fd = (p.energy(t, &[x + h]) - p.energy(t, &[x - h])) / (2.0 * h);
            assert!((fd - g[0]).abs() < 1e-5 * (1.0 + g[0].abs()));
        }
    }

    #[test]
    fn unknown_scenario_is_rejected() {
        assert_eq!(
            builtin_scenario("quadruple_well", &KeyValues::new()),
            Err(Error::UnknownScenario("quadruple_well".into()))
        );
    }

    #[test]
    fn overrides_apply_last() {
        let mut o = KeyValues::new();
        o.set("scenario.beta", 3.0);
        o.set("sim.m", 17);
        let (field, cfg) = builtin_scenario("double_well", &o).unwrap();
        assert_eq!(field.beta, 3.0);
        assert_eq!(cfg.m, 17);
    }

    #[test]
    fn single_step_noise_free_pairs_are_identity() {
        let field = free_field(1e30);
        let cfg = SimConfig {
            t0: 0.0,
            t1: 0.5,
            dt: 0.5,
            m: 3,
            seed: 9,
            initial: InitialSampler::Points(vec![vec![-1.0], vec![0.25], vec![3.0]]),
        };
        let ens = sample_pairs(&field, &cfg).unwrap();
        assert!((ens.x.clone() - ens.y.clone()).abs().max() < 1e-9);
    }

    #[test]
    fn final_partial_step_lands_on_t1() {
        // noise-free OU: three full steps of 0.3 and one of 0.1
        let field = DriftField::new(Potential::Harmonic { dim: 1, stiffness: 1.0 }, 1e300).unwrap();
        let mut rng = substream(1, 0, 0, 0);
        let x = integrate_path(&field, &[2.0], 0.0, 1.0, 0.3, &mut rng).unwrap();
        assert!((x[0] - 2.0 * 0.7f64.powi(3) * 0.9).abs() < 1e-12);
    }

    #[test]
    fn invalid_configs_name_their_field() {
        let field = free_field(1.0);
        let mut cfg = SimConfig {
            t0: 0.0,
            t1: 1.0,
            dt: 0.1,
            m: 0,
            seed: 0,
            initial: InitialSampler::Points(vec![vec![0.0]]),
        };
        assert!(matches!(cfg.validate(1), Err(Error::InvalidConfig { ref field, .. }) if field == "sim.m"));
        cfg.m = 1;
        cfg.dt = 2.0;
        assert!(matches!(cfg.validate(1), Err(Error::InvalidConfig { ref field, .. }) if field == "sim.dt"));
        cfg.dt = 0.1;
        cfg.t1 = -1.0;
        assert!(matches!(sample_pairs(&field, &cfg), Err(Error::InvalidConfig { .. })));
    }

    #[test]
    fn divergent_paths_are_reported_with_index() {
        // W = −x⁴-like blow-up: harmonic with negative stiffness and a huge step
        let field = DriftField::new(Potential::Harmonic { dim: 1, stiffness: -1e200 }, 1.0).unwrap();
        let cfg = SimConfig {
            t0: 0.0,
            t1: 10.0,
            dt: 1.0,
            m: 4,
            seed: 3,
            initial: InitialSampler::Points(vec![vec![1.0]]),
        };
        assert_eq!(
            sample_pairs(&field, &cfg),
            Err(Error::DivergentPair {
                index: 0,
                retries: MAX_RETRIES
            })
        );
    }

    #[test]
    fn kv_round_trip_of_every_sampler() {
        for name in ["double_well", "shifting_triple_well", "seven_well_circular"] {
            let (field, cfg) = builtin_scenario(name, &KeyValues::new()).unwrap();
            let kv = scenario_to_kv(ScenarioName::parse(name).unwrap(), &field, &cfg);
            let (f2, c2) = scenario_from_kv(&kv).unwrap();
            assert_eq!((f2, c2), (field, cfg));
        }
        let mut o = KeyValues::new();
        o.set("init", "points");
        o.set("init.points", "0.5;-0.25");
        let (field, cfg) = builtin_scenario("double_well", &o).unwrap();
        assert_eq!(cfg.initial, InitialSampler::Points(vec![vec![0.5], vec![-0.25]]));
        let kv = scenario_to_kv(ScenarioName::DoubleWell, &field, &cfg);
        assert_eq!(kv.to_string(), scenario_to_kv(ScenarioName::DoubleWell, &scenario_from_kv(&kv).unwrap().0, &cfg).to_string());
    }
}
